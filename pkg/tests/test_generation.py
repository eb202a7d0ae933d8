import numpy as np
import pytest

from stableplace.generation import (
    GenerationError,
    GenerationStats,
    generate_stable_scene,
    in_contact,
    is_fixed_point,
    random_baseline_pose,
    rng_for,
    top_height,
)
from stableplace.physics import SimConfig
from stableplace.scene import Scene, SceneObject
from stableplace.se3 import Pose
from stableplace.shapes import default_catalog

CAT = default_catalog()
SIM = SimConfig()


def test_rng_streams_are_independent_and_reproducible():
    a = rng_for(3, 0).random(5)
    assert np.array_equal(a, rng_for(3, 0).random(5))
    assert not np.array_equal(a, rng_for(3, 1).random(5))
    assert not np.array_equal(a, rng_for(4, 0).random(5))


@pytest.mark.parametrize("n", [1, 2, 3])
def test_placement_scenes_are_fixed_points(n):
    stats = GenerationStats()
    for i in range(4):
        try:
            scene = generate_stable_scene(n, CAT, rng_for(11, i), SIM, stats=stats)
        except GenerationError:
            continue
        assert len(scene) == n and scene.query_index == n - 1
        assert is_fixed_point(scene, SIM, CAT)
        for o in scene.objects:
            assert o.pose.apply(CAT[o.shape].vertices)[:, 2].min() > -5e-3
    assert stats.drops >= n


def test_generation_is_deterministic():
    a = generate_stable_scene(2, CAT, rng_for(5, 2), SIM)
    b = generate_stable_scene(2, CAT, rng_for(5, 2), SIM)
    for p, q in zip(a.poses, b.poses):
        assert np.array_equal(p.matrix(), q.matrix())
    assert a.shapes == b.shapes


def test_placement_contact_rate():
    # a fair share of 3-block placement scenes should have blocks touching each other
    touching = total = 0
    for i in range(10):
        try:
            s = generate_stable_scene(3, CAT, rng_for(21, i), SIM)
        except GenerationError:
            continue
        total += 1
        touching += any(in_contact(s, 2, j, CAT) for j in range(2))
    assert total >= 7
    assert touching / total >= 0.3


def test_stacking_mode_contacts():
    s = generate_stable_scene(2, CAT, rng_for(8, 0), SIM, mode="stacking", shapes=["cube", "cube"])
    assert s.shapes == ["cube", "cube"]
    assert in_contact(s, 1, 0, CAT)
    assert not in_contact(s, 1, -1, CAT)


def test_bad_arguments():
    with pytest.raises(ValueError):
        generate_stable_scene(0, CAT, rng_for(0, 0))
    with pytest.raises(ValueError):
        generate_stable_scene(1, CAT, rng_for(0, 0), mode="tower")


def test_baseline_pose_modes():
    base = SceneObject("cube", Pose(np.eye(3), [0.1, -0.05, 0.05]))
    top = SceneObject("cube", Pose(np.eye(3), [0.12, -0.05, 0.15]))
    ctx = [base, top]
    rng = np.random.default_rng(0)
    for _ in range(50):
        p = random_baseline_pose(ctx, "hat", "stack", rng, CAT)
        np.testing.assert_allclose(p.translation[:2], [0.12, -0.05])
        low = p.apply(CAT["hat"].vertices)[:, 2].min()
        assert top_height(ctx, CAT) - 1e-12 <= low <= top_height(ctx, CAT) + 0.1
    xy = np.array([random_baseline_pose(ctx, "cube", "placement", rng, CAT).translation[:2] for _ in range(2000)])
    np.testing.assert_allclose(xy.mean(0), [0.11, -0.05], atol=0.005)
    assert xy.std(0) == pytest.approx([0.05, 0.05], rel=0.1)
    lone = random_baseline_pose([], "cube", "placement", rng, CAT)
    assert lone.apply(CAT["cube"].vertices)[:, 2].min() >= -1e-12
    with pytest.raises(ValueError):
        random_baseline_pose(ctx, "cube", "sideways", rng, CAT)


def test_stacked_scene_contact_detection():
    s = Scene((SceneObject("cube", Pose(np.eye(3), [0, 0, 0.05])),
               SceneObject("cube", Pose(np.eye(3), [0, 0, 0.1505]))), 1)
    assert in_contact(s, 1, 0, CAT)
    assert in_contact(s, 0, -1, CAT)
    assert not in_contact(s, 1, -1, CAT)
