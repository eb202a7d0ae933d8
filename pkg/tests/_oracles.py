"""Independent reference implementations used by the test suite."""

import numpy as np

from stableplace.se3 import expmap, expmap_batch, logmap_batch


def _face_lattice(shape, a):
    """Hexagonal lattice of spacing ``a`` on every face, plus points along every edge."""
    pts = []
    for fi, f in enumerate(shape.faces):
        P = shape.vertices[list(f)]
        n = shape.normals[fi]
        u = P[1] - P[0]
        u /= np.linalg.norm(u)
        v = np.cross(n, u)
        uv = (P - P[0]) @ np.stack([u, v], 1)
        lo, hi = uv.min(0), uv.max(0)
        rows = np.arange(lo[1], hi[1] + a, a * np.sqrt(3) / 2)
        grid = []
        for r, y in enumerate(rows):
            xs = np.arange(lo[0] + (a / 2 if r % 2 else 0), hi[0] + a, a)
            grid.append(np.column_stack([xs, np.full_like(xs, y)]))
        g = np.concatenate(grid)
        ok = np.ones(len(g), bool)
        m = len(uv)
        for i in range(m):
            A, B = uv[i], uv[(i + 1) % m]
            e = B - A
            ok &= (e[0] * (g[:, 1] - A[1]) - e[1] * (g[:, 0] - A[0])) >= -1e-15
        g = g[ok]
        pts.append(P[0] + g[:, :1] * u + g[:, 1:] * v)
    for i, j in shape.edges:
        A, B = shape.vertices[i], shape.vertices[j]
        k = int(np.ceil(np.linalg.norm(B - A) / a))
        t = np.linspace(0, 1, k + 1)
        pts.append(A + t[:, None] * (B - A))
    return np.concatenate(pts)


def dense_surface(shape, n=100_000):
    """At most ``n`` near-uniform surface points (deterministic lattice, not random samples)."""
    a = np.sqrt(2 * shape.face_areas.sum() / (np.sqrt(3) * n))
    for _ in range(100):
        S = _face_lattice(shape, a)
        if len(S) <= n:
            return S
        a *= 1.01
    raise RuntimeError("lattice did not converge")


def inside_by_halfspaces(shape, P):
    return np.all(P @ shape.normals.T - shape.offsets <= 0, axis=1)


def sdf_oracle(shape, P, surface):
    """Signed nearest-surface-sample distance."""
    s2 = (surface**2).sum(1)
    d = np.empty(len(P))
    for i in range(0, len(P), 256):
        Q = P[i : i + 256]
        # |p - s|^2 expanded so the bulk is one matrix product
        d2 = (Q**2).sum(1)[:, None] - 2 * Q @ surface.T + s2
        d[i : i + 256] = np.sqrt(np.maximum(d2.min(1), 0.0))
    return np.where(inside_by_halfspaces(shape, P), -d, d)


def point_polyhedron_distance(shape, p):
    """Closest-point distance by brute force over triangles (outside points only)."""
    tris, _ = shape._triangles
    best = np.inf
    for A, B, C in tris:
        best = min(best, _point_triangle(p, A, B, C))
    return best


def _point_triangle(p, a, b, c):
    # Ericson, Real-Time Collision Detection, 5.1.5
    ab, ac, ap = b - a, c - a, p - a
    d1, d2 = ab @ ap, ac @ ap
    if d1 <= 0 and d2 <= 0:
        return np.linalg.norm(p - a)
    bp = p - b
    d3, d4 = ab @ bp, ac @ bp
    if d3 >= 0 and d4 <= d3:
        return np.linalg.norm(p - b)
    vc = d1 * d4 - d3 * d2
    if vc <= 0 and d1 >= 0 and d3 <= 0:
        v = d1 / (d1 - d3)
        return np.linalg.norm(p - (a + v * ab))
    cp = p - c
    d5, d6 = ab @ cp, ac @ cp
    if d6 >= 0 and d5 <= d6:
        return np.linalg.norm(p - c)
    vb = d5 * d2 - d1 * d6
    if vb <= 0 and d2 >= 0 and d6 <= 0:
        w = d2 / (d2 - d6)
        return np.linalg.norm(p - (a + w * ac))
    va = d3 * d6 - d5 * d4
    if va <= 0 and (d4 - d3) >= 0 and (d5 - d6) >= 0:
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        return np.linalg.norm(p - (b + w * (c - b)))
    denom = 1.0 / (va + vb + vc)
    v, w = vb * denom, vc * denom
    return np.linalg.norm(p - (a + ab * v + ac * w))


def pointwise_sdf(shape, p):
    """Scalar SDF from first principles: max plane distance inside, triangle distance outside."""
    plane = shape.normals @ p - shape.offsets
    if np.all(plane <= 0):
        return float(plane.max())
    return float(point_polyhedron_distance(shape, p))


def brute_force_cloud_sdf(scene, query_pose, rows, owners, catalog):
    """Double loop over points and bodies, evaluating each body's SDF one point at a time."""
    out = np.empty(len(rows))
    for n in range(len(rows)):
        p = rows[n, :3]
        best = np.inf
        if owners[n] != -1:
            best = p[2]
        for j, obj in enumerate(scene.objects):
            if j == owners[n]:
                continue
            pose = query_pose if j == scene.query_index else obj.pose
            local = pose.rotation.T @ (p - pose.translation)
            best = min(best, pointwise_sdf(catalog[obj.shape], local))
        out[n] = best
    return out


def active_pattern(model, cloud, x_t, t):
    """Discrete choices of a denoiser forward pass: kNN graphs, max winners, relu signs.

    Recomputed from the weights with plain torch ops, independently of the
    custom kernels.
    """
    import torch

    from stableplace.denoiser import KNN_DIMS

    with torch.no_grad():
        x = cloud.clone()
        if not model.config.use_sdf:
            x[..., 3] = 0.0
        k = min(model.config.k_nn, x.shape[1] - 1)
        parts, outs = [], []
        for i, conv in enumerate(model.convs):
            feats = x[..., list(KNN_DIMS)] if i == 0 else x
            idx = torch.argsort(torch.cdist(feats, feats), dim=-1, stable=True)[..., :k]
            W = conv.lin.weight
            neigh = x @ W[:, conv.c_in:].T
            gathered = torch.gather(neigh.unsqueeze(1).expand(-1, x.shape[1], -1, -1), 2,
                                    idx.unsqueeze(-1).expand(-1, -1, -1, neigh.shape[-1]))
            src = torch.gather(idx, 2, gathered.argmax(dim=2))
            pre = x @ (W[:, :conv.c_in] - W[:, conv.c_in:]).T + conv.lin.bias + gathered.max(dim=2).values
            x = torch.nn.functional.leaky_relu(pre, 0.2)
            outs.append(x)
            parts += [idx.sort(-1).values, src, pre > 0]
        pooled = torch.cat(outs, -1)
        parts.append(pooled.argmax(dim=1))
        h = torch.cat([model.project(pooled.max(dim=1).values)] + ([x_t] if model.config.use_pose else [])
                      + [model.t_embed(t)], -1)
        for layer in model.head[:-1]:
            h = layer(h)
            parts.append(h > 0)
            h = torch.relu(h)
    return [p.clone() for p in parts]


def finite_difference_errors(model, loss_fn, h=1e-5, floor=1e-6, pattern_fn=None):
    """Central differences on every scalar weight.

    Returns ``(worst relative error per tensor, number of skipped weights)``.
    With ``pattern_fn``, weights whose +-h step changes the discrete active
    set are skipped: the loss is only piecewise smooth, and a difference
    quotient straddling a kink says nothing about the derivative.
    """
    import torch

    from stableplace.denoiser import gradient

    def same(a, b):
        return all(torch.equal(u, v) for u, v in zip(a, b))

    analytic = gradient(loss_fn, model)
    base = pattern_fn() if pattern_fn else None
    worst, skipped = {}, 0
    with torch.no_grad():
        for name, p in model.named_parameters():
            flat = p.view(-1)
            g = analytic[name].view(-1)
            err = 0.0
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + h
                up = float(loss_fn())
                kink = pattern_fn is not None and not same(base, pattern_fn())
                flat[i] = old - h
                down = float(loss_fn())
                kink = kink or (pattern_fn is not None and not same(base, pattern_fn()))
                flat[i] = old
                if kink:
                    skipped += 1
                    continue
                fd = (up - down) / (2 * h)
                a = float(g[i])
                err = max(err, abs(fd - a) / max(abs(fd), abs(a), floor))
            worst[name] = err
    return worst, skipped


# diffusion


def pointmass_oracle(P, sched, parameterization="epsilon"):
    """Exact denoiser when every data sample equals the pose vector ``P``."""
    RP = expmap(P[3:])

    def denoise(x, t):
        if parameterization == "x0":
            return np.tile(P, (len(x), 1))
        R = RP.T @ expmap_batch(x[:, 3:])
        eps = np.concatenate([x[:, :3] - P[:3], logmap_batch(R, warn=False)], axis=1)
        return eps / sched.sigma(t)

    return denoise


def gaussian_x0_oracle(mu, s, sched):
    """Posterior mean E[x0 | x_t] on the x translation channel for x0 ~ N(mu, s^2)."""

    def denoise(x, t):
        a = s**2 / (s**2 + sched.sigma(t) ** 2)
        out = np.zeros_like(x)
        out[:, 0] = mu + a * (x[:, 0] - mu)
        return out

    return denoise


def sampler_variance(s, sched):
    """Closed-form output variance of the x_{t-1} = x0_hat + sigma_{t-1} eps chain with the oracle above."""
    v = sched.sigmas[-1] ** 2
    for t in range(sched.T, 0, -1):
        a = s**2 / (s**2 + sched.sigma(t) ** 2)
        v = a * a * v + sched.sigma(t - 1) ** 2
    return v
