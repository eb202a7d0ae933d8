import warnings

import numpy as np
import pytest

from stableplace.se3 import (
    BranchAmbiguityWarning,
    Pose,
    canonicalize,
    decode_pose,
    encode_pose,
    expmap,
    expmap_batch,
    hat,
    is_rotation,
    logmap,
    logmap_batch,
    perturb_pose,
    random_rotation,
    relative_rotation_angle,
)


def rodrigues_oracle(w):
    """Independent reference: rotation from the unit-quaternion of axis-angle w."""
    w = np.asarray(w, float)
    th = np.linalg.norm(w)
    if th == 0:
        return np.eye(3)
    a, (x, y, z) = np.cos(th / 2), np.sin(th / 2) * w / th
    return np.array([
        [a * a + x * x - y * y - z * z, 2 * (x * y - a * z), 2 * (x * z + a * y)],
        [2 * (x * y + a * z), a * a - x * x + y * y - z * z, 2 * (y * z - a * x)],
        [2 * (x * z - a * y), 2 * (y * z + a * x), a * a - x * x - y * y + z * z],
    ])


def test_expmap_analytic_cases():
    assert np.array_equal(expmap([0, 0, 0]), np.eye(3))
    np.testing.assert_allclose(expmap([np.pi / 2, 0, 0]), [[1, 0, 0], [0, 0, -1], [0, 1, 0]], atol=1e-12)
    np.testing.assert_allclose(expmap([0, 0, np.pi]), np.diag([-1.0, -1.0, 1.0]), atol=1e-12)


def test_expmap_matches_quaternion_oracle():
    rng = np.random.default_rng(1)
    for w in rng.normal(size=(200, 3)) * 2:
        np.testing.assert_allclose(expmap(w), rodrigues_oracle(w), atol=1e-12)


def test_expmap_small_angle_series():
    rng = np.random.default_rng(2)
    for _ in range(100):
        w = rng.normal(size=3)
        w *= rng.uniform(1e-12, 9e-9) / np.linalg.norm(w)
        np.testing.assert_allclose(expmap(w), np.eye(3) + hat(w), atol=1e-12)


def test_expmap_output_is_rotation():
    rng = np.random.default_rng(3)
    W = rng.normal(size=(100_000, 3)) * 3
    R = expmap_batch(W)
    err = np.abs(np.einsum("nji,njk->nik", R, R) - np.eye(3)).max()
    assert err < 1e-9
    assert np.abs(np.linalg.det(R) - 1).max() < 1e-9


def test_expmap_batch_matches_scalar():
    rng = np.random.default_rng(4)
    W = np.concatenate([rng.normal(size=(50, 3)), np.zeros((1, 3)), 1e-10 * rng.normal(size=(5, 3))])
    np.testing.assert_allclose(expmap_batch(W), np.stack([expmap(w) for w in W]), atol=1e-14)


def test_logmap_analytic_cases():
    assert np.array_equal(logmap(np.eye(3)), np.zeros(3))
    with pytest.warns(BranchAmbiguityWarning):
        w = logmap(np.diag([1.0, -1.0, -1.0]))
    np.testing.assert_allclose(w, [np.pi, 0, 0], atol=1e-12)


def test_logmap_pi_branch_sign_convention():
    for axis in ([0, 1, 1], [0, -1, 1], [-1, 2, 0.5]):
        a = np.asarray(axis, float) / np.linalg.norm(axis)
        R = 2 * np.outer(a, a) - np.eye(3)  # rotation by pi about a
        with pytest.warns(BranchAmbiguityWarning):
            w = logmap(R)
        nz = w[np.abs(w) > 1e-12][0]
        assert nz > 0
        np.testing.assert_allclose(np.abs(w), np.pi * np.abs(a), atol=1e-9)
        np.testing.assert_allclose(expmap(w), R, atol=1e-9)


def test_logmap_warning_can_be_silenced():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        logmap(np.diag([1.0, -1.0, -1.0]), warn=False)


def test_log_exp_round_trip():
    rng = np.random.default_rng(5)
    W = rng.normal(size=(10_000, 3))
    W *= (rng.uniform(0, np.pi - 0.1, size=len(W)) / np.linalg.norm(W, axis=1))[:, None]
    back = logmap_batch(expmap_batch(W))
    assert np.abs(back - W).max() < 1e-7


def test_exp_log_round_trip_near_pi():
    rng = np.random.default_rng(6)
    for _ in range(200):
        R = random_rotation(rng)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", BranchAmbiguityWarning)
            w = logmap(R)
        assert np.linalg.norm(w) <= np.pi + 1e-12
        np.testing.assert_allclose(expmap(w), R, atol=1e-7)
    for eps in (1e-3, 1e-5, 1e-7, 0.0):
        a = rng.normal(size=3)
        a /= np.linalg.norm(a)
        R = expmap((np.pi - eps) * a)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", BranchAmbiguityWarning)
            np.testing.assert_allclose(expmap(logmap(R)), R, atol=1e-7)


def test_pose_group_laws():
    rng = np.random.default_rng(7)
    for _ in range(100):
        A, B, C = (Pose(random_rotation(rng), rng.normal(size=3)) for _ in range(3))
        np.testing.assert_allclose(A.compose(B).compose(C).matrix(), A.compose(B.compose(C)).matrix(), atol=1e-9)
        np.testing.assert_allclose(A.compose(B).inverse().matrix(), B.inverse().compose(A.inverse()).matrix(),
                                   atol=1e-9)
        np.testing.assert_allclose(A.matrix() @ B.matrix(), A.compose(B).matrix(), atol=1e-12)


def test_perturb_pose_cases():
    rng = np.random.default_rng(8)
    H = Pose(random_rotation(rng), rng.normal(size=3))
    same = perturb_pose(H, np.zeros(6))
    np.testing.assert_allclose(same.matrix(), H.matrix(), atol=0)
    moved = perturb_pose(Pose.identity(), [1, 0, 0, 0, 0, 0])
    np.testing.assert_allclose(moved.translation, [1, 0, 0])
    np.testing.assert_allclose(moved.rotation, np.eye(3))
    flipped = perturb_pose(Pose.identity(), [0, 0, 0, 0, 0, np.pi])
    np.testing.assert_allclose(flipped.rotation, np.diag([-1.0, -1.0, 1.0]), atol=1e-12)


def test_perturb_pose_right_multiplies():
    rng = np.random.default_rng(9)
    for _ in range(50):
        H = Pose(random_rotation(rng), rng.normal(size=3))
        e = rng.normal(size=6)
        P = perturb_pose(H, e)
        np.testing.assert_allclose(P.rotation, H.rotation @ rodrigues_oracle(e[3:]), atol=1e-12)
        np.testing.assert_allclose(P.rotation @ expmap(-e[3:]), H.rotation, atol=1e-9)


def test_encode_decode():
    assert np.array_equal(encode_pose(Pose.identity()), np.zeros(6))
    np.testing.assert_allclose(encode_pose(Pose(np.eye(3), [0.1, 0.2, 0.3])), [0.1, 0.2, 0.3, 0, 0, 0])
    rng = np.random.default_rng(10)
    for _ in range(10_000):
        H = Pose(random_rotation(rng), rng.normal(size=3))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", BranchAmbiguityWarning)
            back = decode_pose(encode_pose(H))
        assert np.abs(back.matrix() - H.matrix()).max() < 1e-7


def test_canonicalize_wraps_long_vectors():
    w = np.array([0, 0, 1.5 * np.pi])
    x = canonicalize(np.concatenate([[1, 2, 3], w]))
    assert np.linalg.norm(x[3:]) <= np.pi
    np.testing.assert_allclose(expmap(x[3:]), expmap(w), atol=1e-12)
    np.testing.assert_allclose(x[:3], [1, 2, 3])


def test_relative_rotation_angle():
    rng = np.random.default_rng(11)
    R = random_rotation(rng)
    assert relative_rotation_angle(R, R) == pytest.approx(0, abs=1e-7)
    assert relative_rotation_angle(np.eye(3), np.diag([-1.0, -1.0, 1.0])) == pytest.approx(np.pi)
    for _ in range(1000):
        A, B, C = (random_rotation(rng) for _ in range(3))
        ac = relative_rotation_angle(A, C)
        assert 0 <= ac <= np.pi
        assert ac <= relative_rotation_angle(A, B) + relative_rotation_angle(B, C) + 1e-9


def test_random_rotation_is_uniform():
    # mean geodesic angle from identity under the Haar measure is pi/2 + 2/pi
    rng = np.random.default_rng(12)
    ang = [relative_rotation_angle(np.eye(3), random_rotation(rng)) for _ in range(20_000)]
    assert np.degrees(np.mean(ang)) == pytest.approx(np.degrees(np.pi / 2 + 2 / np.pi), abs=1.0)
    assert is_rotation(random_rotation(rng))
