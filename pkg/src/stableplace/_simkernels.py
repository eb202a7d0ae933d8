"""Compiled kernels for the rigid-body settling simulator.

Everything in here works on flat, padded arrays so numba can compile it in
nopython mode. Body index -1 denotes the static ground halfspace z <= 0.
"""

import numpy as np
from numba import njit

STATUS_OK = 0
STATUS_NONFINITE = 1

EDGE_TOL = 5e-4
FACE_TOL = 1e-5
MATCH_DIST = 2e-3


@njit(cache=True)
def _cross(ax, ay, az, bx, by, bz):
    return ay * bz - az * by, az * bx - ax * bz, ax * by - ay * bx


@njit(cache=True)
def _matvec(M, x, y, z):
    return (
        M[0, 0] * x + M[0, 1] * y + M[0, 2] * z,
        M[1, 0] * x + M[1, 1] * y + M[1, 2] * z,
        M[2, 0] * x + M[2, 1] * y + M[2, 2] * z,
    )


@njit(cache=True)
def world_vertices(verts, nv, pos, rot):
    nb = verts.shape[0]
    out = np.zeros_like(verts)
    for b in range(nb):
        for k in range(nv[b]):
            for r in range(3):
                out[b, k, r] = (
                    rot[b, r, 0] * verts[b, k, 0] + rot[b, r, 1] * verts[b, k, 1] + rot[b, r, 2] * verts[b, k, 2]
                    + pos[b, r]
                )
    return out


@njit(cache=True)
def _face_world(fnorm, foff, rot, pos, b, f):
    nx, ny, nz = _matvec(rot[b], fnorm[b, f, 0], fnorm[b, f, 1], fnorm[b, f, 2])
    d = foff[b, f] + nx * pos[b, 0] + ny * pos[b, 1] + nz * pos[b, 2]
    return nx, ny, nz, d


@njit(cache=True)
def _face_sep(wv, nv, fnorm, foff, nf, rot, pos, ref, inc):
    """Best (largest) separation over the face normals of ``ref`` against ``inc``'s vertices."""
    best = -1e30
    best_f = -1
    for f in range(nf[ref]):
        nx, ny, nz, d = _face_world(fnorm, foff, rot, pos, ref, f)
        m = 1e30
        for k in range(nv[inc]):
            s = nx * wv[inc, k, 0] + ny * wv[inc, k, 1] + nz * wv[inc, k, 2] - d
            if s < m:
                m = s
        if m > best:
            best = m
            best_f = f
    return best, best_f


@njit(cache=True)
def _edge_sep(wv, nv, edges, ne, pos, i, j):
    best = -1e30
    bi = -1
    bj = -1
    bax = 0.0
    bay = 0.0
    baz = 0.0
    for ei in range(ne[i]):
        a0 = edges[i, ei, 0]
        a1 = edges[i, ei, 1]
        dax = wv[i, a1, 0] - wv[i, a0, 0]
        day = wv[i, a1, 1] - wv[i, a0, 1]
        daz = wv[i, a1, 2] - wv[i, a0, 2]
        la = np.sqrt(dax * dax + day * day + daz * daz)
        for ej in range(ne[j]):
            b0 = edges[j, ej, 0]
            b1 = edges[j, ej, 1]
            dbx = wv[j, b1, 0] - wv[j, b0, 0]
            dby = wv[j, b1, 1] - wv[j, b0, 1]
            dbz = wv[j, b1, 2] - wv[j, b0, 2]
            lb = np.sqrt(dbx * dbx + dby * dby + dbz * dbz)
            cx, cy, cz = _cross(dax, day, daz, dbx, dby, dbz)
            lc = np.sqrt(cx * cx + cy * cy + cz * cz)
            if lc < 1e-6 * la * lb:
                continue
            cx /= lc
            cy /= lc
            cz /= lc
            if cx * (wv[i, a0, 0] - pos[i, 0]) + cy * (wv[i, a0, 1] - pos[i, 1]) + cz * (wv[i, a0, 2] - pos[i, 2]) < 0:
                cx = -cx
                cy = -cy
                cz = -cz
            maxa = -1e30
            for k in range(nv[i]):
                s = cx * wv[i, k, 0] + cy * wv[i, k, 1] + cz * wv[i, k, 2]
                if s > maxa:
                    maxa = s
            minb = 1e30
            for k in range(nv[j]):
                s = cx * wv[j, k, 0] + cy * wv[j, k, 1] + cz * wv[j, k, 2]
                if s < minb:
                    minb = s
            sep = minb - maxa
            if sep > best:
                best = sep
                bi = ei
                bj = ej
                bax = cx
                bay = cy
                baz = cz
    return best, bi, bj, bax, bay, baz


@njit(cache=True)
def pair_separation(wv, nv, fnorm, foff, nf, edges, ne, rot, pos, i, j):
    sa, _ = _face_sep(wv, nv, fnorm, foff, nf, rot, pos, i, j)
    sb, _ = _face_sep(wv, nv, fnorm, foff, nf, rot, pos, j, i)
    se, _, _, _, _, _ = _edge_sep(wv, nv, edges, ne, pos, i, j)
    return max(sa, max(sb, se))


@njit(cache=True)
def _segments_closest(p1, q1, p2, q2):
    d1 = q1 - p1
    d2 = q2 - p2
    r = p1 - p2
    a = d1 @ d1
    e = d2 @ d2
    f = d2 @ r
    c = d1 @ r
    b = d1 @ d2
    denom = a * e - b * b
    s = 0.0
    if denom > 1e-20:
        s = min(max((b * f - c * e) / denom, 0.0), 1.0)
    t = (b * s + f) / e
    if t < 0.0:
        t = 0.0
        s = min(max(-c / a, 0.0), 1.0)
    elif t > 1.0:
        t = 1.0
        s = min(max((b - c) / a, 0.0), 1.0)
    return p1 + d1 * s, p2 + d2 * t


@njit(cache=True)
def _add_contact(cn, ca, cb, cp, cnrm, csep, a, b, px, py, pz, nx, ny, nz, sep):
    k = cn[0]
    if k >= ca.shape[0]:
        return
    ca[k] = a
    cb[k] = b
    cp[k, 0] = px
    cp[k, 1] = py
    cp[k, 2] = pz
    cnrm[k, 0] = nx
    cnrm[k, 1] = ny
    cnrm[k, 2] = nz
    csep[k] = sep
    cn[0] = k + 1


@njit(cache=True)
def _face_contacts(wv, nv, fnorm, foff, nf, fverts, fnv, rot, pos, ref, fr, inc, flip, margin,
                   cn, ca, cb, cp, cnrm, csep, a_idx, b_idx):
    nx, ny, nz, dref = _face_world(fnorm, foff, rot, pos, ref, fr)
    # incident face: most anti-parallel to the reference normal
    best = 1e30
    fi = 0
    for f in range(nf[inc]):
        mx, my, mz = _matvec(rot[inc], fnorm[inc, f, 0], fnorm[inc, f, 1], fnorm[inc, f, 2])
        dd = mx * nx + my * ny + mz * nz
        if dd < best:
            best = dd
            fi = f
    cap = fverts.shape[2] * 2 + 8
    poly = np.zeros((cap, 3))
    tmp = np.zeros((cap, 3))
    m = fnv[inc, fi]
    for k in range(m):
        v = fverts[inc, fi, k]
        poly[k, 0] = wv[inc, v, 0]
        poly[k, 1] = wv[inc, v, 1]
        poly[k, 2] = wv[inc, v, 2]
    mr = fnv[ref, fr]
    for e in range(mr):
        v0 = fverts[ref, fr, e]
        v1 = fverts[ref, fr, (e + 1) % mr]
        ex = wv[ref, v1, 0] - wv[ref, v0, 0]
        ey = wv[ref, v1, 1] - wv[ref, v0, 1]
        ez = wv[ref, v1, 2] - wv[ref, v0, 2]
        sx, sy, sz = _cross(ex, ey, ez, nx, ny, nz)
        c = sx * wv[ref, v0, 0] + sy * wv[ref, v0, 1] + sz * wv[ref, v0, 2]
        # Sutherland-Hodgman against the side plane s.p <= c
        out = 0
        for k in range(m):
            k2 = (k + 1) % m
            d1 = sx * poly[k, 0] + sy * poly[k, 1] + sz * poly[k, 2] - c
            d2 = sx * poly[k2, 0] + sy * poly[k2, 1] + sz * poly[k2, 2] - c
            if d1 <= 0.0:
                if out < cap:
                    tmp[out] = poly[k]
                    out += 1
            if (d1 <= 0.0) != (d2 <= 0.0):
                t = d1 / (d1 - d2)
                if out < cap:
                    tmp[out] = poly[k] + t * (poly[k2] - poly[k])
                    out += 1
        m = out
        for k in range(m):
            poly[k] = tmp[k]
        if m == 0:
            break
    sgn = -1.0 if flip else 1.0
    for k in range(m):
        sep = nx * poly[k, 0] + ny * poly[k, 1] + nz * poly[k, 2] - dref
        if sep <= margin:
            _add_contact(cn, ca, cb, cp, cnrm, csep, a_idx, b_idx,
                         poly[k, 0] - 0.5 * sep * nx, poly[k, 1] - 0.5 * sep * ny, poly[k, 2] - 0.5 * sep * nz,
                         sgn * nx, sgn * ny, sgn * nz, sep)


@njit(cache=True)
def generate_contacts(wv, nv, fnorm, foff, nf, fverts, fnv, edges, ne, radius, rot, pos, margin,
                      ca, cb, cp, cnrm, csep):
    """Fill the contact buffers; returns the contact count. Normals point from a to b."""
    nb = wv.shape[0]
    cn = np.zeros(1, dtype=np.int64)
    for b in range(nb):
        if pos[b, 2] - radius[b] > margin:
            continue
        for k in range(nv[b]):
            z = wv[b, k, 2]
            if z <= margin:
                _add_contact(cn, ca, cb, cp, cnrm, csep, -1, b, wv[b, k, 0], wv[b, k, 1], wv[b, k, 2] - 0.5 * z,
                             0.0, 0.0, 1.0, z)
    for i in range(nb):
        for j in range(i + 1, nb):
            dx = pos[j, 0] - pos[i, 0]
            dy = pos[j, 1] - pos[i, 1]
            dz = pos[j, 2] - pos[i, 2]
            rr = radius[i] + radius[j] + margin
            if dx * dx + dy * dy + dz * dz > rr * rr:
                continue
            sa, fa = _face_sep(wv, nv, fnorm, foff, nf, rot, pos, i, j)
            if sa > margin:
                continue
            sb, fb = _face_sep(wv, nv, fnorm, foff, nf, rot, pos, j, i)
            if sb > margin:
                continue
            se, ei, ej, ax, ay, az = _edge_sep(wv, nv, edges, ne, pos, i, j)
            if se > margin:
                continue
            sf = max(sa, sb)
            if ei >= 0 and se > sf + EDGE_TOL:
                p1 = wv[i, edges[i, ei, 0]].copy()
                q1 = wv[i, edges[i, ei, 1]].copy()
                p2 = wv[j, edges[j, ej, 0]].copy()
                q2 = wv[j, edges[j, ej, 1]].copy()
                c1, c2 = _segments_closest(p1, q1, p2, q2)
                mid = 0.5 * (c1 + c2)
                _add_contact(cn, ca, cb, cp, cnrm, csep, i, j, mid[0], mid[1], mid[2], ax, ay, az, se)
            elif sb > sa + FACE_TOL:
                _face_contacts(wv, nv, fnorm, foff, nf, fverts, fnv, rot, pos, j, fb, i, True, margin,
                               cn, ca, cb, cp, cnrm, csep, i, j)
            else:
                _face_contacts(wv, nv, fnorm, foff, nf, fverts, fnv, rot, pos, i, fa, j, False, margin,
                               cn, ca, cb, cp, cnrm, csep, i, j)
    return cn[0]


@njit(cache=True)
def _tangents(nx, ny, nz):
    if abs(nx) < 0.57735:
        ex, ey, ez = 1.0, 0.0, 0.0
    else:
        ex, ey, ez = 0.0, 1.0, 0.0
    tx, ty, tz = _cross(nx, ny, nz, ex, ey, ez)
    lt = np.sqrt(tx * tx + ty * ty + tz * tz)
    tx /= lt
    ty /= lt
    tz /= lt
    ux, uy, uz = _cross(nx, ny, nz, tx, ty, tz)
    return tx, ty, tz, ux, uy, uz


@njit(cache=True)
def _eff_mass(invm, Iinv, a, b, rax, ray, raz, rbx, rby, rbz, dx, dy, dz):
    k = 0.0
    if a >= 0:
        cx, cy, cz = _cross(rax, ray, raz, dx, dy, dz)
        ix, iy, iz = _matvec(Iinv[a], cx, cy, cz)
        qx, qy, qz = _cross(ix, iy, iz, rax, ray, raz)
        k += invm[a] + qx * dx + qy * dy + qz * dz
    if b >= 0:
        cx, cy, cz = _cross(rbx, rby, rbz, dx, dy, dz)
        ix, iy, iz = _matvec(Iinv[b], cx, cy, cz)
        qx, qy, qz = _cross(ix, iy, iz, rbx, rby, rbz)
        k += invm[b] + qx * dx + qy * dy + qz * dz
    return 1.0 / k if k > 0 else 0.0


@njit(cache=True)
def _apply(vel, omg, invm, Iinv, a, b, r, px, py, pz):
    if a >= 0:
        vel[a, 0] -= invm[a] * px
        vel[a, 1] -= invm[a] * py
        vel[a, 2] -= invm[a] * pz
        cx, cy, cz = _cross(r[0], r[1], r[2], px, py, pz)
        ix, iy, iz = _matvec(Iinv[a], cx, cy, cz)
        omg[a, 0] -= ix
        omg[a, 1] -= iy
        omg[a, 2] -= iz
    if b >= 0:
        vel[b, 0] += invm[b] * px
        vel[b, 1] += invm[b] * py
        vel[b, 2] += invm[b] * pz
        cx, cy, cz = _cross(r[3], r[4], r[5], px, py, pz)
        ix, iy, iz = _matvec(Iinv[b], cx, cy, cz)
        omg[b, 0] += ix
        omg[b, 1] += iy
        omg[b, 2] += iz


@njit(cache=True)
def _rel_vel(vel, omg, a, b, r):
    vx = 0.0
    vy = 0.0
    vz = 0.0
    if b >= 0:
        cx, cy, cz = _cross(omg[b, 0], omg[b, 1], omg[b, 2], r[3], r[4], r[5])
        vx += vel[b, 0] + cx
        vy += vel[b, 1] + cy
        vz += vel[b, 2] + cz
    if a >= 0:
        cx, cy, cz = _cross(omg[a, 0], omg[a, 1], omg[a, 2], r[0], r[1], r[2])
        vx -= vel[a, 0] + cx
        vy -= vel[a, 1] + cy
        vz -= vel[a, 2] + cz
    return vx, vy, vz


@njit(cache=True)
def _orthonormalize(R):
    # one Newton step of the polar decomposition, repeated twice
    for _ in range(2):
        RtR = R.T @ R
        R[:, :] = R @ (1.5 * np.eye(3) - 0.5 * RtR)


@njit(cache=True)
def _expmap(wx, wy, wz):
    th = np.sqrt(wx * wx + wy * wy + wz * wz)
    W = np.zeros((3, 3))
    W[0, 1] = -wz
    W[0, 2] = wy
    W[1, 0] = wz
    W[1, 2] = -wx
    W[2, 0] = -wy
    W[2, 1] = wx
    if th < 1e-8:
        return np.eye(3) + W + 0.5 * (W @ W)
    return np.eye(3) + (np.sin(th) / th) * W + ((1.0 - np.cos(th)) / (th * th)) * (W @ W)


@njit(cache=True)
def energy(pos, rot, vel, omg, mass, Ibody, gravity):
    e = 0.0
    for b in range(pos.shape[0]):
        e += mass[b] * gravity * pos[b, 2]
        e += 0.5 * mass[b] * (vel[b, 0] ** 2 + vel[b, 1] ** 2 + vel[b, 2] ** 2)
        Iw = rot[b] @ Ibody[b] @ rot[b].T
        w = omg[b]
        e += 0.5 * (w @ (Iw @ w))
    return e


@njit(cache=True)
def simulate(verts, nv, fnorm, foff, nf, fverts, fnv, edges, ne, radius, mass, Ibody, Ibody_inv,
             pos, rot, vel, omg,
             dt, gravity, mu, iterations, beta, slop, max_correction, margin,
             rest_lin, rest_ang, rest_window, max_steps, record_energy):
    """Advance until every body rests for ``rest_window`` steps or ``max_steps`` elapse.

    State arrays are updated in place. Returns (steps, converged, status, energies).
    """
    nb = pos.shape[0]
    maxv = verts.shape[1]
    cap = nb * maxv + (nb * (nb - 1) // 2) * (2 * fverts.shape[2] + 8) + 8
    ca = np.zeros(cap, dtype=np.int64)
    cb = np.zeros(cap, dtype=np.int64)
    cp = np.zeros((cap, 3))
    cnrm = np.zeros((cap, 3))
    csep = np.zeros(cap)
    jn = np.zeros(cap)
    jt1 = np.zeros(cap)
    jt2 = np.zeros(cap)
    r = np.zeros((cap, 6))
    tang = np.zeros((cap, 6))
    mn = np.zeros(cap)
    mt1 = np.zeros(cap)
    mt2 = np.zeros(cap)
    bias = np.zeros(cap)
    # warm-start memory: pair ids, point in b's frame, impulses
    pa = np.zeros(cap, dtype=np.int64)
    pb = np.zeros(cap, dtype=np.int64)
    plocal = np.zeros((cap, 3))
    nlocal = np.zeros((cap, 3))
    pjn = np.zeros(cap)
    pjt1 = np.zeros(cap)
    pjt2 = np.zeros(cap)
    npr = 0
    invm = 1.0 / mass
    Iinv = np.zeros((nb, 3, 3))
    energies = np.zeros(max_steps + 1 if record_energy else 1)
    if record_energy:
        energies[0] = energy(pos, rot, vel, omg, mass, Ibody, gravity)

    rest_count = 0
    steps = 0
    converged = False
    while steps < max_steps:
        steps += 1
        for b in range(nb):
            vel[b, 2] -= gravity * dt
            Iinv[b] = rot[b] @ Ibody_inv[b] @ rot[b].T
        wv = world_vertices(verts, nv, pos, rot)
        nc = generate_contacts(wv, nv, fnorm, foff, nf, fverts, fnv, edges, ne, radius, rot, pos, margin,
                               ca, cb, cp, cnrm, csep)
        for c in range(nc):
            a = ca[c]
            b = cb[c]
            for q in range(3):
                r[c, q] = cp[c, q] - pos[a, q] if a >= 0 else 0.0
                r[c, 3 + q] = cp[c, q] - pos[b, q]
            nx = cnrm[c, 0]
            ny = cnrm[c, 1]
            nz = cnrm[c, 2]
            tx, ty, tz, ux, uy, uz = _tangents(nx, ny, nz)
            tang[c, 0] = tx
            tang[c, 1] = ty
            tang[c, 2] = tz
            tang[c, 3] = ux
            tang[c, 4] = uy
            tang[c, 5] = uz
            mn[c] = _eff_mass(invm, Iinv, a, b, r[c, 0], r[c, 1], r[c, 2], r[c, 3], r[c, 4], r[c, 5], nx, ny, nz)
            mt1[c] = _eff_mass(invm, Iinv, a, b, r[c, 0], r[c, 1], r[c, 2], r[c, 3], r[c, 4], r[c, 5], tx, ty, tz)
            mt2[c] = _eff_mass(invm, Iinv, a, b, r[c, 0], r[c, 1], r[c, 2], r[c, 3], r[c, 4], r[c, 5], ux, uy, uz)
            s = csep[c]
            if s < 0.0:
                bias[c] = min(beta / dt * max(-s - slop, 0.0), max_correction)
            else:
                bias[c] = -s / dt
            # warm start from the closest remembered contact of the same pair
            jn[c] = 0.0
            jt1[c] = 0.0
            jt2[c] = 0.0
            lx = cp[c, 0] - pos[b, 0]
            ly = cp[c, 1] - pos[b, 1]
            lz = cp[c, 2] - pos[b, 2]
            lx, ly, lz = (
                rot[b, 0, 0] * lx + rot[b, 1, 0] * ly + rot[b, 2, 0] * lz,
                rot[b, 0, 1] * lx + rot[b, 1, 1] * ly + rot[b, 2, 1] * lz,
                rot[b, 0, 2] * lx + rot[b, 1, 2] * ly + rot[b, 2, 2] * lz,
            )
            bestd = MATCH_DIST * MATCH_DIST
            bestk = -1
            for k in range(npr):
                if pa[k] != a or pb[k] != b:
                    continue
                d2 = (plocal[k, 0] - lx) ** 2 + (plocal[k, 1] - ly) ** 2 + (plocal[k, 2] - lz) ** 2
                if d2 < bestd:
                    bestd = d2
                    bestk = k
            if bestk >= 0:
                jn[c] = pjn[bestk]
                jt1[c] = pjt1[bestk]
                jt2[c] = pjt2[bestk]
                px = jn[c] * nx + jt1[c] * tx + jt2[c] * ux
                py = jn[c] * ny + jt1[c] * ty + jt2[c] * uy
                pz = jn[c] * nz + jt1[c] * tz + jt2[c] * uz
                _apply(vel, omg, invm, Iinv, a, b, r[c], px, py, pz)
            nlocal[c, 0] = lx
            nlocal[c, 1] = ly
            nlocal[c, 2] = lz

        for it in range(iterations):
            for c in range(nc):
                a = ca[c]
                b = cb[c]
                nx = cnrm[c, 0]
                ny = cnrm[c, 1]
                nz = cnrm[c, 2]
                vx, vy, vz = _rel_vel(vel, omg, a, b, r[c])
                # friction, bounded by the current normal impulse
                lim = mu * jn[c]
                vt = vx * tang[c, 0] + vy * tang[c, 1] + vz * tang[c, 2]
                old = jt1[c]
                jt1[c] = min(max(old - mt1[c] * vt, -lim), lim)
                d = jt1[c] - old
                _apply(vel, omg, invm, Iinv, a, b, r[c], d * tang[c, 0], d * tang[c, 1], d * tang[c, 2])
                vx, vy, vz = _rel_vel(vel, omg, a, b, r[c])
                vt = vx * tang[c, 3] + vy * tang[c, 4] + vz * tang[c, 5]
                old = jt2[c]
                jt2[c] = min(max(old - mt2[c] * vt, -lim), lim)
                d = jt2[c] - old
                _apply(vel, omg, invm, Iinv, a, b, r[c], d * tang[c, 3], d * tang[c, 4], d * tang[c, 5])
                # normal
                vx, vy, vz = _rel_vel(vel, omg, a, b, r[c])
                vn = vx * nx + vy * ny + vz * nz
                old = jn[c]
                jn[c] = max(old + mn[c] * (bias[c] - vn), 0.0)
                d = jn[c] - old
                _apply(vel, omg, invm, Iinv, a, b, r[c], d * nx, d * ny, d * nz)

        for c in range(nc):
            pa[c] = ca[c]
            pb[c] = cb[c]
            pjn[c] = jn[c]
            pjt1[c] = jt1[c]
            pjt2[c] = jt2[c]
            plocal[c] = nlocal[c]
        npr = nc

        resting = True
        for b in range(nb):
            for q in range(3):
                pos[b, q] += vel[b, q] * dt
            rot[b] = _expmap(omg[b, 0] * dt, omg[b, 1] * dt, omg[b, 2] * dt) @ rot[b]
            _orthonormalize(rot[b])
            lv = np.sqrt(vel[b, 0] ** 2 + vel[b, 1] ** 2 + vel[b, 2] ** 2)
            av = np.sqrt(omg[b, 0] ** 2 + omg[b, 1] ** 2 + omg[b, 2] ** 2)
            if not (np.isfinite(lv) and np.isfinite(av) and np.isfinite(pos[b, 0] + pos[b, 1] + pos[b, 2])):
                return steps, False, STATUS_NONFINITE, energies
            if lv >= rest_lin or av >= rest_ang:
                resting = False
        if record_energy:
            energies[steps] = energy(pos, rot, vel, omg, mass, Ibody, gravity)
        rest_count = rest_count + 1 if resting else 0
        if rest_count >= rest_window:
            converged = True
            break
    return steps, converged, STATUS_OK, energies
