"""Deterministic rigid-body settling and displacement scoring."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _simkernels as K
from .scene import Scene
from .se3 import Pose, relative_rotation_angle
from .shapes import ShapeCatalog, default_catalog

DENSITY = 500.0  # kg/m^3
MAX_INITIAL_PENETRATION = 5e-3


class SimulationError(RuntimeError):
    pass


class PenetrationError(SimulationError):
    """Bodies start interpenetrating deeper than the solver is allowed to resolve."""

    def __init__(self, pair, depth):
        self.pair = pair
        self.depth = depth
        super().__init__(f"initial interpenetration of {depth * 1e3:.2f} mm between bodies {pair[0]} and {pair[1]}")


class SimulationFault(SimulationError):
    pass


@dataclass(frozen=True)
class SimConfig:
    timestep: float = 1.0 / 240.0
    gravity: float = 9.81
    friction_coeff: float = 0.6
    restitution: float = 0.0
    solver_iterations: int = 20
    rest_linear_speed: float = 1e-3
    rest_angular_speed: float = 1e-2
    rest_window: int = 60
    max_steps: int = 4800
    baumgarte: float = 0.2
    slop: float = 5e-4
    max_correction_speed: float = 1.0
    contact_margin: float = 0.02

    def __post_init__(self):
        for name in ("timestep", "gravity", "friction_coeff", "solver_iterations", "rest_linear_speed",
                     "rest_angular_speed", "rest_window", "max_steps"):
            if not getattr(self, name) > 0:
                raise ValueError(f"SimConfig.{name} must be positive")
        if self.restitution != 0.0:
            # the impulse solver is purely inelastic
            raise ValueError("only restitution = 0 is supported")


@dataclass
class SettleResult:
    settled_poses: list[Pose]
    steps_used: int
    converged: bool
    energies: np.ndarray | None = field(default=None, repr=False)


@dataclass
class DisplacementReport:
    per_object: list[tuple[float, float]]

    @property
    def scene_max_trans_pct(self) -> float:
        return max((t for t, _ in self.per_object), default=0.0)

    @property
    def scene_max_rot_deg(self) -> float:
        return max((r for _, r in self.per_object), default=0.0)


class _Packed:
    """Padded per-body geometry arrays for the compiled kernels."""

    def __init__(self, shapes):
        nb = len(shapes)
        mv = max(len(s.vertices) for s in shapes)
        mf = max(len(s.faces) for s in shapes)
        mfv = max(len(f) for s in shapes for f in s.faces)
        me = max(len(s.edges) for s in shapes)
        self.verts = np.zeros((nb, mv, 3))
        self.nv = np.zeros(nb, dtype=np.int64)
        self.fnorm = np.zeros((nb, mf, 3))
        self.foff = np.zeros((nb, mf))
        self.nf = np.zeros(nb, dtype=np.int64)
        self.fverts = np.zeros((nb, mf, mfv), dtype=np.int64)
        self.fnv = np.zeros((nb, mf), dtype=np.int64)
        self.edges = np.zeros((nb, me, 2), dtype=np.int64)
        self.ne = np.zeros(nb, dtype=np.int64)
        self.radius = np.zeros(nb)
        self.mass = np.zeros(nb)
        self.Ibody = np.zeros((nb, 3, 3))
        self.Ibody_inv = np.zeros((nb, 3, 3))
        for b, s in enumerate(shapes):
            V = s.vertices
            self.verts[b, : len(V)] = V
            self.nv[b] = len(V)
            self.fnorm[b, : len(s.faces)] = s.normals
            self.foff[b, : len(s.faces)] = s.offsets
            self.nf[b] = len(s.faces)
            for f, idx in enumerate(s.faces):
                self.fverts[b, f, : len(idx)] = idx
                self.fnv[b, f] = len(idx)
            self.edges[b, : len(s.edges)] = s.edges
            self.ne[b] = len(s.edges)
            self.radius[b] = np.linalg.norm(V, axis=1).max()
            vol, _, inertia = s.mass_properties
            self.mass[b] = DENSITY * vol
            self.Ibody[b] = DENSITY * inertia
            self.Ibody_inv[b] = np.linalg.inv(self.Ibody[b])

    def geometry(self):
        return (self.verts, self.nv, self.fnorm, self.foff, self.nf, self.fverts, self.fnv, self.edges, self.ne)


def _state(poses):
    pos = np.array([p.translation for p in poses], dtype=float)
    rot = np.array([p.rotation for p in poses], dtype=float)
    return pos, rot


def deepest_penetration(scene: Scene, catalog: ShapeCatalog | None = None):
    """Most negative separation over ground and block pairs: ``(depth, (i, j))``.

    ``i == -1`` denotes the ground. Depth is positive when bodies overlap.
    """
    catalog = catalog or default_catalog()
    packed = _Packed([catalog[o.shape] for o in scene.objects])
    pos, rot = _state(scene.poses)
    wv = K.world_vertices(packed.verts, packed.nv, pos, rot)
    worst, pair = -np.inf, None
    for b in range(len(scene)):
        depth = -float(wv[b, : packed.nv[b], 2].min())
        if depth > worst:
            worst, pair = depth, (-1, b)
    for i in range(len(scene)):
        for j in range(i + 1, len(scene)):
            sep = K.pair_separation(wv, packed.nv, packed.fnorm, packed.foff, packed.nf, packed.edges, packed.ne,
                                    rot, pos, i, j)
            if -sep > worst:
                worst, pair = -sep, (i, j)
    return worst, pair


def settle(
    scene: Scene,
    cfg: SimConfig | None = None,
    catalog: ShapeCatalog | None = None,
    *,
    strict: bool = True,
    record_energy: bool = False,
) -> SettleResult:
    """Simulate gravity and contacts from rest until every block stops moving.

    With ``strict`` (the default) an initial overlap deeper than 5 mm raises
    :class:`PenetrationError`; otherwise the solver pushes the bodies apart.
    """
    cfg = cfg or SimConfig()
    catalog = catalog or default_catalog()
    if strict:
        depth, pair = deepest_penetration(scene, catalog)
        if depth > MAX_INITIAL_PENETRATION:
            raise PenetrationError(pair, depth)
    packed = _Packed([catalog[o.shape] for o in scene.objects])
    pos, rot = _state(scene.poses)
    vel = np.zeros_like(pos)
    omg = np.zeros_like(pos)
    steps, converged, status, energies = K.simulate(
        *packed.geometry(), packed.radius, packed.mass, packed.Ibody, packed.Ibody_inv,
        pos, rot, vel, omg,
        cfg.timestep, cfg.gravity, cfg.friction_coeff, cfg.solver_iterations, cfg.baumgarte, cfg.slop,
        cfg.max_correction_speed, cfg.contact_margin,
        cfg.rest_linear_speed, cfg.rest_angular_speed, cfg.rest_window, cfg.max_steps, record_energy,
    )
    if status != K.STATUS_OK:
        raise SimulationFault(f"non-finite body state after {steps} steps")
    poses = [Pose(r, p) for r, p in zip(rot, pos)]
    return SettleResult(poses, int(steps), bool(converged), energies[: steps + 1] if record_energy else None)


def displacement_metrics(initial, settled, shapes, catalog: ShapeCatalog | None = None) -> DisplacementReport:
    """Per-object translation (% of the block diameter) and rotation (degrees)."""
    if len(initial) != len(settled) or len(initial) != len(shapes):
        raise ValueError("initial, settled and shapes must have equal lengths")
    catalog = catalog or default_catalog()
    rows = []
    for a, b, s in zip(initial, settled, shapes):
        diam = s.diameter if hasattr(s, "diameter") else catalog[s].diameter
        trans = 100.0 * float(np.linalg.norm(b.translation - a.translation)) / diam
        rot = float(np.degrees(relative_rotation_angle(a.rotation, b.rotation)))
        rows.append((trans, rot))
    return DisplacementReport(rows)


def stack_success(report: DisplacementReport, max_trans_pct: float = 25.0, max_rot_deg: float = 15.0) -> bool:
    return report.scene_max_trans_pct < max_trans_pct and report.scene_max_rot_deg < max_rot_deg


def settle_and_score(scene: Scene, cfg: SimConfig | None = None, catalog: ShapeCatalog | None = None,
                     strict: bool = True) -> tuple[SettleResult, DisplacementReport]:
    catalog = catalog or default_catalog()
    result = settle(scene, cfg, catalog, strict=strict)
    report = displacement_metrics(scene.poses, result.settled_poses, scene.shapes, catalog)
    return result, report
