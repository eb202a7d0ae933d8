"""Convex block shapes: exact signed distance, surface sampling, mass properties,
and the human-editable catalog file."""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources
from pathlib import Path

import numpy as np

SHAPE_NAMES = (
    "tall-triangle",
    "middle-triangle",
    "half-rectangle",
    "rectangle",
    "cube",
    "tetrahedron",
    "hat",
)

CATALOG_ENV = "STABLEPLACE_CATALOG"
CONVEX_TOL = 1e-9
CENTROID_TOL = 1e-6

# projection types returned by BlockShape.sdf_with_feature
INSIDE, FACE, EDGE, VERTEX = 0, 1, 2, 3


class CatalogError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class BlockShape:
    """Convex polyhedron in its body frame (origin at the solid centroid).

    ``faces`` hold vertex indices ordered counter-clockwise seen from outside.
    """

    name: str
    vertices: np.ndarray
    faces: tuple[tuple[int, ...], ...]
    normals: np.ndarray = field(init=False, repr=False)
    offsets: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        V = np.array(self.vertices, dtype=float).reshape(-1, 3)
        object.__setattr__(self, "vertices", V)
        object.__setattr__(self, "faces", tuple(tuple(int(i) for i in f) for f in self.faces))
        normals, offsets = [], []
        for f in self.faces:
            P = V[list(f)]
            # Newell's method is robust for planar polygons of any size
            n = np.zeros(3)
            for a, b in zip(P, np.roll(P, -1, axis=0)):
                n += np.cross(a, b)
            n /= np.linalg.norm(n)
            normals.append(n)
            offsets.append(float(np.mean(P @ n)))
        object.__setattr__(self, "normals", np.array(normals))
        object.__setattr__(self, "offsets", np.array(offsets))

    @cached_property
    def edges(self) -> np.ndarray:
        seen = set()
        for f in self.faces:
            for a, b in zip(f, f[1:] + f[:1]):
                seen.add((min(a, b), max(a, b)))
        return np.array(sorted(seen), dtype=int)

    @cached_property
    def _edge_planes(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """Per face, outward in-plane edge normals ``M`` and offsets ``c``: inside iff ``M q <= c``."""
        out = []
        for fi, f in enumerate(self.faces):
            A = self.vertices[list(f)]
            M = np.cross(np.roll(A, -1, axis=0) - A, self.normals[fi])
            out.append((M, np.einsum("ij,ij->i", M, A)))
        return out

    @cached_property
    def diameter(self) -> float:
        V = self.vertices
        d = np.linalg.norm(V[:, None, :] - V[None, :, :], axis=-1)
        return float(d.max())

    @cached_property
    def _triangles(self) -> np.ndarray:
        """Fan triangulation, shape (n_tri, 3, 3), plus owning face index."""
        tris, owner = [], []
        for fi, f in enumerate(self.faces):
            for k in range(1, len(f) - 1):
                tris.append(self.vertices[[f[0], f[k], f[k + 1]]])
                owner.append(fi)
        return np.array(tris), np.array(owner)

    @cached_property
    def face_areas(self) -> np.ndarray:
        tris, owner = self._triangles
        a = 0.5 * np.linalg.norm(np.cross(tris[:, 1] - tris[:, 0], tris[:, 2] - tris[:, 0]), axis=1)
        return np.bincount(owner, weights=a, minlength=len(self.faces))

    @cached_property
    def mass_properties(self) -> tuple[float, np.ndarray, np.ndarray]:
        """Volume, centroid and inertia tensor (about the centroid) at unit density."""
        return polyhedron_mass_properties(self.vertices, self.faces)

    @property
    def volume(self) -> float:
        return self.mass_properties[0]

    @property
    def centroid(self) -> np.ndarray:
        return self.mass_properties[1]

    @property
    def lowest_z(self) -> float:
        return float(self.vertices[:, 2].min())

    def validate(self) -> None:
        V = self.vertices
        if len(V) < 4 or len(self.faces) < 4:
            raise CatalogError(f"{self.name}: a solid needs at least 4 vertices and 4 faces")
        if self.diameter <= 0:
            raise CatalogError(f"{self.name}: degenerate shape")
        for fi, (n, d) in enumerate(zip(self.normals, self.offsets)):
            dist = V @ n - d
            if dist.max() > CONVEX_TOL:
                raise CatalogError(f"{self.name}: face {fi} is not a supporting plane (non-convex or wrong winding)")
            if np.abs(dist[list(self.faces[fi])]).max() > CONVEX_TOL:
                raise CatalogError(f"{self.name}: face {fi} is not planar")
        if np.linalg.norm(self.centroid) > CENTROID_TOL:
            raise CatalogError(f"{self.name}: solid centroid {self.centroid} is not at the origin")

    def sdf(self, p) -> np.ndarray | float:
        d, _ = self.sdf_with_feature(p)
        return d if np.ndim(p) > 1 else float(d[0])

    def sdf_with_feature(self, p) -> tuple[np.ndarray, np.ndarray]:
        """Exact signed distance and closest-feature type for body-frame points.

        Inside points take the largest face-plane distance. Outside points take
        the minimum over face projections that land inside their polygon and
        over all edge segments.
        """
        P = np.atleast_2d(np.asarray(p, dtype=float))
        plane = P @ self.normals.T - self.offsets  # (N, F)
        inside_val = plane.max(axis=1)
        inside = inside_val <= 0.0

        feature = np.full(len(P), INSIDE, dtype=int)
        best = np.full(len(P), np.inf)
        for fi, (M, c) in enumerate(self._edge_planes):
            Q = P - plane[:, fi : fi + 1] * self.normals[fi]
            ok = np.all(Q @ M.T <= c, axis=1)
            cand = np.where(ok, np.abs(plane[:, fi]), np.inf)
            better = cand < best
            best = np.where(better, cand, best)
            feature = np.where(better, FACE, feature)

        A = self.vertices[self.edges[:, 0]]
        B = self.vertices[self.edges[:, 1]]
        AB = B - A
        t = np.einsum("nej,ej->ne", P[:, None, :] - A[None], AB) / np.einsum("ej,ej->e", AB, AB)
        tc = np.clip(t, 0.0, 1.0)
        closest = A[None] + tc[..., None] * AB[None]
        dist = np.linalg.norm(P[:, None, :] - closest, axis=-1)
        k = dist.argmin(axis=1)
        edist = dist[np.arange(len(P)), k]
        tk = t[np.arange(len(P)), k]
        better = edist < best
        best = np.where(better, edist, best)
        feature = np.where(better, np.where((tk > 0.0) & (tk < 1.0), EDGE, VERTEX), feature)

        d = np.where(inside, inside_val, best)
        feature = np.where(inside, INSIDE, feature)
        return d, feature

    def sample_surface(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Area-weighted uniform samples on the boundary, shape (n, 3)."""
        if n <= 0:
            return np.zeros((0, 3))
        tris, _ = self._triangles
        areas = 0.5 * np.linalg.norm(np.cross(tris[:, 1] - tris[:, 0], tris[:, 2] - tris[:, 0]), axis=1)
        idx = rng.choice(len(tris), size=n, p=areas / areas.sum())
        u = rng.random((n, 2))
        flip = u.sum(axis=1) > 1.0
        u[flip] = 1.0 - u[flip]
        T = tris[idx]
        return T[:, 0] + u[:, :1] * (T[:, 1] - T[:, 0]) + u[:, 1:] * (T[:, 2] - T[:, 0])

    def sample_surface_with_faces(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        tris, owner = self._triangles
        areas = 0.5 * np.linalg.norm(np.cross(tris[:, 1] - tris[:, 0], tris[:, 2] - tris[:, 0]), axis=1)
        idx = rng.choice(len(tris), size=n, p=areas / areas.sum())
        u = rng.random((n, 2))
        flip = u.sum(axis=1) > 1.0
        u[flip] = 1.0 - u[flip]
        T = tris[idx]
        pts = T[:, 0] + u[:, :1] * (T[:, 1] - T[:, 0]) + u[:, 1:] * (T[:, 2] - T[:, 0])
        return pts, owner[idx]


def diameter(shape: BlockShape) -> float:
    return shape.diameter


def polyhedron_mass_properties(vertices, faces) -> tuple[float, np.ndarray, np.ndarray]:
    """Volume, centroid and centroidal inertia of a closed polyhedron at unit density.

    Decomposes into tetrahedra from the origin to each fan triangle.
    """
    V = np.asarray(vertices, dtype=float)
    vol = 0.0
    first = np.zeros(3)
    second = np.zeros((3, 3))  # integral of x x^T
    canon = np.array([[2.0, 1.0, 1.0], [1.0, 2.0, 1.0], [1.0, 1.0, 2.0]]) / 120.0
    for f in faces:
        for k in range(1, len(f) - 1):
            a, b, c = V[f[0]], V[f[k]], V[f[k + 1]]
            A = np.column_stack([a, b, c])
            det = float(np.linalg.det(A))
            vol += det / 6.0
            first += det / 24.0 * (a + b + c)
            second += det * (A @ canon @ A.T)
    centroid = first / vol
    second_c = second - vol * np.outer(centroid, centroid)
    inertia = np.trace(second_c) * np.eye(3) - second_c
    return vol, centroid, inertia


# --------------------------------------------------------------------------
# default catalog geometry


def _prism(profile_xz, depth: float):
    """Extrude a CCW (seen from -y) polygon in the xz-plane along y."""
    prof = [np.array(p, dtype=float) for p in profile_xz]
    m = len(prof)
    verts = [[x, -depth / 2, z] for x, z in prof] + [[x, depth / 2, z] for x, z in prof]
    faces = [tuple(range(m)), tuple(m + i for i in reversed(range(m)))]
    for i in range(m):
        j = (i + 1) % m
        faces.append((i, m + i, m + j, j))
    return np.array(verts), faces


def _box(sx, sy, sz):
    return _prism([(-sx / 2, -sz / 2), (sx / 2, -sz / 2), (sx / 2, sz / 2), (-sx / 2, sz / 2)], sy)


def _fix_winding(verts, faces):
    """Orient every face outward with respect to the vertex mean."""
    c = verts.mean(axis=0)
    out = []
    for f in faces:
        P = verts[list(f)]
        n = np.cross(P[1] - P[0], P[2] - P[0])
        out.append(tuple(f) if n @ (P[0] - c) > 0 else tuple(reversed(f)))
    return out


def _centered(name, verts, faces) -> BlockShape:
    faces = _fix_winding(np.asarray(verts, dtype=float), faces)
    _, c, _ = polyhedron_mass_properties(verts, faces)
    return BlockShape(name, np.asarray(verts, dtype=float) - c, faces)


def default_shapes() -> dict[str, BlockShape]:
    """Canonical block dimensions in meters."""
    shapes = {}
    shapes["tall-triangle"] = _centered("tall-triangle", *_prism([(0, 0), (0.10, 0), (0, 0.20)], 0.10))
    shapes["middle-triangle"] = _centered("middle-triangle", *_prism([(0, 0), (0.10, 0), (0, 0.10)], 0.10))
    shapes["half-rectangle"] = _centered("half-rectangle", *_box(0.10, 0.10, 0.05))
    shapes["rectangle"] = _centered("rectangle", *_box(0.20, 0.10, 0.10))
    shapes["cube"] = _centered("cube", *_box(0.10, 0.10, 0.10))
    e = 0.12
    tet = np.array(
        [[0, 0, 0], [e, 0, 0], [e / 2, e * np.sqrt(3) / 2, 0], [e / 2, e * np.sqrt(3) / 6, e * np.sqrt(2.0 / 3.0)]]
    )
    shapes["tetrahedron"] = _centered("tetrahedron", tet, [(0, 1, 2), (0, 1, 3), (1, 2, 3), (0, 2, 3)])
    shapes["hat"] = _centered("hat", *_prism([(-0.07, 0), (0.07, 0), (0, 0.07)], 0.10))
    return {k: shapes[k] for k in SHAPE_NAMES}


# --------------------------------------------------------------------------
# catalog file


@dataclass
class ShapeCatalog:
    shapes: dict[str, BlockShape]
    source: str | None = None

    def __getitem__(self, name: str) -> BlockShape:
        try:
            return self.shapes[name]
        except KeyError:
            raise KeyError(f"unknown shape {name!r}; catalog has {sorted(self.shapes)}") from None

    def __contains__(self, name: str) -> bool:
        return name in self.shapes

    def __iter__(self):
        return iter(self.shapes)

    def __len__(self) -> int:
        return len(self.shapes)

    @property
    def names(self) -> list[str]:
        return list(self.shapes)

    def to_text(self) -> str:
        lines = ["# block shape catalog: lengths in meters, body frame at the solid centroid", "format = 1", ""]
        for s in self.shapes.values():
            lines.append(f"[shape {s.name}]")
            for v in s.vertices:
                lines.append("vertex = " + " ".join(repr(float(c)) for c in v))
            for f in s.faces:
                lines.append("face = " + " ".join(str(i) for i in f))
            lines.append("")
        return "\n".join(lines)

    @cached_property
    def hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def from_text(cls, text: str, source: str | None = None) -> "ShapeCatalog":
        where = source or "<catalog>"
        shapes: dict[str, BlockShape] = {}
        current = None
        verts: list = []
        faces: list = []
        block_line = 0

        def close():
            if current is None:
                return
            try:
                shape = BlockShape(current, np.array(verts, dtype=float), faces)
                for f in faces:
                    if any(i < 0 or i >= len(verts) for i in f) or len(f) < 3:
                        raise CatalogError(f"{current}: bad face {f}")
                shape.validate()
            except CatalogError as exc:
                raise CatalogError(f"{where}:{block_line}: {exc}") from None
            except (ValueError, IndexError, ZeroDivisionError, np.linalg.LinAlgError) as exc:
                raise CatalogError(f"{where}:{block_line}: {current}: invalid geometry ({exc})") from None
            shapes[current] = shape

        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if line.startswith("[") and line.endswith("]"):
                close()
                head = line[1:-1].split()
                if len(head) != 2 or head[0] != "shape":
                    raise CatalogError(f"{where}:{lineno}: expected '[shape NAME]'")
                current, verts, faces, block_line = head[1], [], [], lineno
                if current in shapes:
                    raise CatalogError(f"{where}:{lineno}: duplicate shape {current!r}")
                continue
            if "=" not in line:
                raise CatalogError(f"{where}:{lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            if key == "format":
                if value != "1":
                    raise CatalogError(f"{where}:{lineno}: unsupported catalog format {value}")
            elif current is None:
                raise CatalogError(f"{where}:{lineno}: {key!r} outside a [shape] block")
            elif key == "vertex":
                try:
                    v = [float(x) for x in value.split()]
                except ValueError:
                    raise CatalogError(f"{where}:{lineno}: vertex needs 3 numbers") from None
                if len(v) != 3 or not all(np.isfinite(v)):
                    raise CatalogError(f"{where}:{lineno}: vertex needs 3 finite numbers")
                verts.append(v)
            elif key == "face":
                try:
                    faces.append(tuple(int(x) for x in value.split()))
                except ValueError:
                    raise CatalogError(f"{where}:{lineno}: face needs integer vertex indices") from None
            else:
                raise CatalogError(f"{where}:{lineno}: unknown key {key!r}")
        close()
        if not shapes:
            raise CatalogError(f"{where}: no shapes defined")
        return cls(shapes, source)

    @classmethod
    def load(cls, path) -> "ShapeCatalog":
        path = Path(path)
        return cls.from_text(path.read_text(), str(path))


_DEFAULT: ShapeCatalog | None = None


def default_catalog() -> ShapeCatalog:
    """The packaged catalog, or the file named by ``$STABLEPLACE_CATALOG``."""
    global _DEFAULT
    override = os.environ.get(CATALOG_ENV)
    if override:
        return ShapeCatalog.load(override)
    if _DEFAULT is None:
        text = resources.files("stableplace").joinpath("data/catalog.txt").read_text()
        _DEFAULT = ShapeCatalog.from_text(text, "stableplace/data/catalog.txt")
    return _DEFAULT
