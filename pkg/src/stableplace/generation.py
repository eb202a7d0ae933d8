"""Stable scene generation by sequential drops, and the random placement baseline."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .physics import SimConfig, SimulationError, displacement_metrics, settle
from .scene import Scene, SceneObject
from .se3 import Pose, random_rotation
from .shapes import ShapeCatalog, default_catalog

log = logging.getLogger(__name__)

DROP_SIGMA_XY = 0.04
STACK_SIGMA_XY = 0.01
DROP_GAP = (0.02, 0.10)
WORKSPACE_HALF = 0.3
FIXED_POINT_TRANS_PCT = 2.0
FIXED_POINT_ROT_DEG = 2.0
CONTACT_DIST = 1e-3
BASELINE_SIGMA_XY = 0.05
BASELINE_GAP = 0.1


class GenerationError(RuntimeError):
    pass


@dataclass
class GenerationStats:
    drops: int = 0
    rejected_unconverged: int = 0
    rejected_workspace: int = 0
    rejected_structure: int = 0
    rejected_fixed_point: int = 0


def rng_for(seed: int, index: int) -> np.random.Generator:
    """Independent stream for item ``index`` of a run seeded with ``seed``."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(index,)))


def top_height(objects, catalog: ShapeCatalog) -> float:
    top = 0.0
    for o in objects:
        V = o.pose.apply(catalog[o.shape].vertices)
        top = max(top, float(V[:, 2].max()))
    return top


def lowest_offset(shape, R: np.ndarray) -> float:
    """Distance from the body origin down to the lowest vertex when rotated by ``R``."""
    return -float((shape.vertices @ R.T)[:, 2].min())


def _top_object(objects, catalog) -> int:
    return int(np.argmax([o.pose.apply(catalog[o.shape].vertices)[:, 2].max() for o in objects]))


def in_contact(scene: Scene, i: int, j: int, catalog: ShapeCatalog, tol: float = CONTACT_DIST) -> bool:
    """Whether block ``i`` touches block ``j`` (``j = -1`` for the ground), checked at vertices."""
    Vi = scene.objects[i].pose.apply(catalog[scene.objects[i].shape].vertices)
    if j < 0:
        return bool(Vi[:, 2].min() < tol)
    Vj = scene.objects[j].pose.apply(catalog[scene.objects[j].shape].vertices)
    # vertex-to-body distance in both directions catches face and vertex contacts
    pose_j, pose_i = scene.objects[j].pose, scene.objects[i].pose
    dij = catalog[scene.objects[j].shape].sdf((Vi - pose_j.translation) @ pose_j.rotation)
    dji = catalog[scene.objects[i].shape].sdf((Vj - pose_i.translation) @ pose_i.rotation)
    return bool(min(np.min(dij), np.min(dji)) < tol)


def is_fixed_point(scene: Scene, cfg: SimConfig, catalog: ShapeCatalog) -> bool:
    res = settle(scene, cfg, catalog)
    if not res.converged:
        return False
    rep = displacement_metrics(scene.poses, res.settled_poses, scene.shapes, catalog)
    return rep.scene_max_trans_pct < FIXED_POINT_TRANS_PCT and rep.scene_max_rot_deg < FIXED_POINT_ROT_DEG


def generate_stable_scene(
    n_blocks: int,
    catalog: ShapeCatalog | None = None,
    rng: np.random.Generator | None = None,
    cfg: SimConfig | None = None,
    mode: str = "placement",
    max_retries: int = 20,
    shapes: list[str] | None = None,
    stats: GenerationStats | None = None,
) -> Scene:
    """Drop blocks one at a time and let them settle.

    In ``placement`` mode each drop is centred near the current structure; in
    ``stacking`` mode it is centred on the top block and must come to rest on
    it without touching the ground. The returned scene is verified to be a
    fixed point of the simulator. ``query_index`` is the last dropped block.
    """
    if n_blocks < 1:
        raise ValueError("n_blocks must be >= 1")
    if mode not in ("placement", "stacking"):
        raise ValueError(f"unknown mode {mode!r}")
    catalog = catalog or default_catalog()
    rng = rng or np.random.default_rng()
    cfg = cfg or SimConfig()
    stats = stats if stats is not None else GenerationStats()
    names = catalog.names

    objects: list[SceneObject] = []
    for k in range(n_blocks):
        name = shapes[k] if shapes is not None else names[int(rng.integers(len(names)))]
        shape = catalog[name]
        for _ in range(max_retries):
            stats.drops += 1
            R = random_rotation(rng)
            if mode == "stacking" and objects:
                top = objects[_top_object(objects, catalog)]
                center, sigma = top.pose.translation[:2], STACK_SIGMA_XY
            elif objects:
                center, sigma = np.mean([o.pose.translation[:2] for o in objects], axis=0), DROP_SIGMA_XY
            else:
                center, sigma = np.zeros(2), DROP_SIGMA_XY
            xy = center + sigma * rng.standard_normal(2)
            z = top_height(objects, catalog) + rng.uniform(*DROP_GAP) + lowest_offset(shape, R)
            trial = Scene(tuple(objects) + (SceneObject(name, Pose(R, [xy[0], xy[1], z])),), len(objects))
            try:
                res = settle(trial, cfg, catalog)
            except SimulationError:
                stats.rejected_unconverged += 1
                continue
            if not res.converged:
                stats.rejected_unconverged += 1
                continue
            settled = trial.with_poses(res.settled_poses)
            if any(np.abs(p.translation[:2]).max() > WORKSPACE_HALF for p in res.settled_poses):
                stats.rejected_workspace += 1
                continue
            if mode == "stacking" and objects:
                below = _top_object(objects, catalog)
                new = len(objects)
                if in_contact(settled, new, -1, catalog) or not in_contact(settled, new, below, catalog):
                    stats.rejected_structure += 1
                    continue
                if any(in_contact(settled, i, -1, catalog) for i in range(1, new)):
                    stats.rejected_structure += 1
                    continue
            objects = list(settled.objects)
            break
        else:
            raise GenerationError(f"block {k} ({name}) could not be placed after {max_retries} drops")

    scene = Scene(tuple(objects), len(objects) - 1)
    if not is_fixed_point(scene, cfg, catalog):
        stats.rejected_fixed_point += 1
        raise GenerationError("settled scene failed the re-settle fixed-point check")
    return scene


def random_baseline_pose(
    context: list[SceneObject],
    query_shape: str,
    mode: str,
    rng: np.random.Generator,
    catalog: ShapeCatalog | None = None,
) -> Pose:
    """Random pose above the context.

    ``placement``: (x, y) Gaussian around the mean context (x, y).
    ``stack``: (x, y) of the highest context block. The orientation is uniform
    and the block's lowest point starts up to 10 cm above the context top.
    """
    catalog = catalog or default_catalog()
    R = random_rotation(rng)
    if mode == "stack" and context:
        xy = np.array(context[_top_object(context, catalog)].pose.translation[:2])
    elif mode in ("placement", "stack"):
        center = np.mean([o.pose.translation[:2] for o in context], axis=0) if context else np.zeros(2)
        xy = center + BASELINE_SIGMA_XY * rng.standard_normal(2)
    else:
        raise ValueError(f"unknown baseline mode {mode!r}")
    z = top_height(context, catalog) + rng.uniform(0.0, BASELINE_GAP) + lowest_offset(catalog[query_shape], R)
    return Pose(R, [xy[0], xy[1], z])
