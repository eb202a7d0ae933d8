"""Scene data model, merged-object SDF and the augmented pointcloud encoder."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .se3 import Pose
from .shapes import ShapeCatalog, default_catalog

GROUND = -1
MAX_OBJECTS = 8
GROUND_PATCH = 0.6  # meters, side of the sampled ground square
WORKSPACE_SCALE = 0.3  # meters per normalized unit
DEFAULT_N_PTS = 128


class SceneError(ValueError):
    pass


@dataclass(frozen=True)
class SceneObject:
    shape: str
    pose: Pose


@dataclass(frozen=True)
class Scene:
    """Ordered blocks over the ground halfspace ``z <= 0`` with one query block."""

    objects: tuple[SceneObject, ...]
    query_index: int = 0

    def __post_init__(self):
        object.__setattr__(self, "objects", tuple(self.objects))
        if not 1 <= len(self.objects) <= MAX_OBJECTS:
            raise SceneError(f"scene must hold 1..{MAX_OBJECTS} objects, got {len(self.objects)}")
        if not 0 <= self.query_index < len(self.objects):
            raise SceneError(f"query_index {self.query_index} out of range for {len(self.objects)} objects")

    def __len__(self) -> int:
        return len(self.objects)

    @property
    def query(self) -> SceneObject:
        return self.objects[self.query_index]

    @property
    def context(self) -> tuple[SceneObject, ...]:
        return tuple(o for i, o in enumerate(self.objects) if i != self.query_index)

    @property
    def poses(self) -> list[Pose]:
        return [o.pose for o in self.objects]

    @property
    def shapes(self) -> list[str]:
        return [o.shape for o in self.objects]

    def with_query_pose(self, pose: Pose) -> "Scene":
        objs = list(self.objects)
        objs[self.query_index] = replace(objs[self.query_index], pose=pose)
        return Scene(tuple(objs), self.query_index)

    def with_poses(self, poses) -> "Scene":
        return Scene(tuple(SceneObject(o.shape, p) for o, p in zip(self.objects, poses)), self.query_index)

    def with_query(self, index: int) -> "Scene":
        return Scene(self.objects, index)

    def validate(self, catalog: ShapeCatalog) -> None:
        for o in self.objects:
            if o.shape not in catalog:
                raise SceneError(f"shape {o.shape!r} not in catalog")


def context_centroid_xy(scene: Scene) -> np.ndarray:
    ctx = scene.context
    if not ctx:
        return np.zeros(2)
    return np.mean([o.pose.translation[:2] for o in ctx], axis=0)


def merged_sdf(scene: Scene, owner: int, p_world, catalog: ShapeCatalog | None = None, query_pose: Pose | None = None):
    """Minimum SDF over every body except ``owner`` (an object index or ``GROUND``).

    The ground contributes ``f(p) = p_z``. ``query_pose`` overrides the pose of
    the query object.
    """
    catalog = catalog or default_catalog()
    P = np.atleast_2d(np.asarray(p_world, dtype=float))
    out = np.full(len(P), np.inf)
    if owner != GROUND:
        out = P[:, 2].copy()
    for j, obj in enumerate(scene.objects):
        if j == owner:
            continue
        pose = query_pose if (query_pose is not None and j == scene.query_index) else obj.pose
        local = (P - pose.translation) @ pose.rotation
        out = np.minimum(out, catalog[obj.shape].sdf_with_feature(local)[0])
    return out if np.ndim(p_world) > 1 else float(out[0])


@dataclass(frozen=True)
class AugmentedPointCloud:
    """Rows ``(x, y, z, sdf, query_flag)`` in world units.

    ``owners`` gives the body index of every row (``GROUND`` for the patch).
    """

    rows: np.ndarray
    owners: np.ndarray = field(repr=False)

    @property
    def points(self) -> np.ndarray:
        return self.rows[:, :3]

    @property
    def sdf(self) -> np.ndarray:
        return self.rows[:, 3]

    @property
    def flags(self) -> np.ndarray:
        return self.rows[:, 4]


def sample_body_clouds(scene: Scene, n_pts: int, rng: np.random.Generator, catalog: ShapeCatalog | None = None):
    """Body-frame surface samples for every object plus the ground patch (in patch coordinates)."""
    catalog = catalog or default_catalog()
    clouds = [catalog[o.shape].sample_surface(n_pts, rng) for o in scene.objects]
    patch = (rng.random((n_pts, 2)) - 0.5) * GROUND_PATCH
    return clouds, patch


def build_augmented_cloud(
    scene: Scene,
    query_pose: Pose,
    n_pts: int = DEFAULT_N_PTS,
    rng: np.random.Generator | None = None,
    catalog: ShapeCatalog | None = None,
    body_clouds=None,
) -> AugmentedPointCloud:
    """Encode a scene with the query block at ``query_pose``.

    Each block contributes ``n_pts`` surface points, followed by ``n_pts``
    points on a ground square centred at the context (x, y) centroid. Every
    point carries the SDF of everything except its own body.
    """
    catalog = catalog or default_catalog()
    if not 0 <= scene.query_index < len(scene.objects):
        raise SceneError("query_index out of range")
    if n_pts < 1:
        raise SceneError("n_pts must be >= 1")
    if body_clouds is None:
        if rng is None:
            raise SceneError("either rng or body_clouds is required")
        body_clouds = sample_body_clouds(scene, n_pts, rng, catalog)
    clouds, patch = body_clouds

    poses = [query_pose if i == scene.query_index else o.pose for i, o in enumerate(scene.objects)]
    world = [c @ p.rotation.T + p.translation for c, p in zip(clouds, poses)]
    center = context_centroid_xy(scene)
    ground = np.column_stack([patch + center, np.zeros(len(patch))])

    pts = np.concatenate(world + [ground])
    owners = np.concatenate([np.full(len(w), i) for i, w in enumerate(world)] + [np.full(len(ground), GROUND)])

    # sdf of every body evaluated on all points, then min excluding the owner
    nb = len(scene.objects)
    table = np.empty((nb + 1, len(pts)))
    for j, (obj, pose) in enumerate(zip(scene.objects, poses)):
        local = (pts - pose.translation) @ pose.rotation
        table[j] = catalog[obj.shape].sdf_with_feature(local)[0]
    table[nb] = pts[:, 2]
    owner_row = np.where(owners == GROUND, nb, owners)
    table[owner_row, np.arange(len(pts))] = np.inf
    sdf = table.min(axis=0)

    flags = (owners == scene.query_index).astype(float)
    rows = np.column_stack([pts, sdf, flags])
    return AugmentedPointCloud(rows, owners)


@dataclass(frozen=True)
class FrameRecord:
    """World -> normalized map ``p' = (p - offset) * scale`` (uniform scale)."""

    offset: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: float = 1.0

    def to_normalized(self, pose: Pose) -> Pose:
        return Pose(pose.rotation, (pose.translation - self.offset) * self.scale)

    def to_world(self, pose: Pose) -> Pose:
        return Pose(pose.rotation, pose.translation / self.scale + self.offset)

    def normalize_cloud(self, rows: np.ndarray) -> np.ndarray:
        out = np.array(rows, dtype=float, copy=True)
        out[..., :3] = (out[..., :3] - self.offset) * self.scale
        out[..., 3] = out[..., 3] * self.scale
        return out


def frame_for(scene: Scene, scale: float = 1.0 / WORKSPACE_SCALE) -> FrameRecord:
    c = context_centroid_xy(scene)
    return FrameRecord(np.array([c[0], c[1], 0.0]), scale)


def normalize_scene(scene: Scene, scale: float = 1.0 / WORKSPACE_SCALE) -> tuple[Scene, FrameRecord]:
    """Shift the context (x, y) centroid to the origin and scale lengths uniformly.

    A scene without context blocks gets the identity record.
    """
    if not scene.context:
        return scene, FrameRecord()
    frame = frame_for(scene, scale)
    return scene.with_poses([frame.to_normalized(p) for p in scene.poses]), frame


def denormalize_scene(scene: Scene, frame: FrameRecord) -> Scene:
    return scene.with_poses([frame.to_world(p) for p in scene.poses])
