"""Rotation and rigid-transform arithmetic, plus the 6-vector pose encoding.

A pose vector is ``(tx, ty, tz, ex, ey, ez)``: the translation of the object
center followed by the exponential coordinates of its orientation.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

SMALL_ANGLE = 1e-8
PI_BRANCH_TOL = 1e-6


class BranchAmbiguityWarning(UserWarning):
    """Raised when logmap is evaluated at a rotation of angle (nearly) pi."""


def hat(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    return np.array(
        [
            [0.0, -w[2], w[1]],
            [w[2], 0.0, -w[0]],
            [-w[1], w[0], 0.0],
        ]
    )


def vee(m: np.ndarray) -> np.ndarray:
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


def expmap(w) -> np.ndarray:
    """Rodrigues formula. Below ``SMALL_ANGLE`` a second-order series is used."""
    w = np.asarray(w, dtype=float)
    theta = float(np.linalg.norm(w))
    W = hat(w)
    if theta < SMALL_ANGLE:
        return np.eye(3) + W + 0.5 * (W @ W)
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / (theta * theta)
    return np.eye(3) + a * W + b * (W @ W)


def expmap_batch(w: np.ndarray) -> np.ndarray:
    """Vectorised ``expmap`` over an ``(N, 3)`` array."""
    w = np.asarray(w, dtype=float).reshape(-1, 3)
    theta = np.linalg.norm(w, axis=1)
    small = theta < SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0, np.sin(safe) / safe)
    b = np.where(small, 0.5, (1.0 - np.cos(safe)) / (safe * safe))
    W = np.zeros((len(w), 3, 3))
    W[:, 0, 1], W[:, 0, 2] = -w[:, 2], w[:, 1]
    W[:, 1, 0], W[:, 1, 2] = w[:, 2], -w[:, 0]
    W[:, 2, 0], W[:, 2, 1] = -w[:, 1], w[:, 0]
    WW = W @ W
    return np.eye(3)[None] + a[:, None, None] * W + b[:, None, None] * WW


def _canonical_axis_sign(axis: np.ndarray) -> np.ndarray:
    for c in axis:
        if abs(c) > 1e-12:
            return axis if c > 0 else -axis
    return axis


def logmap(R, warn: bool = True) -> np.ndarray:
    """Exponential coordinates of ``R`` with norm in ``[0, pi]``.

    Within ``PI_BRANCH_TOL`` of pi the axis is recovered from the largest
    diagonal entry of ``(R + I) / 2`` and signed so its first nonzero
    component is positive; a ``BranchAmbiguityWarning`` is emitted.
    """
    R = np.asarray(R, dtype=float)
    v = vee(R - R.T)
    s = 0.5 * np.linalg.norm(v)
    c = 0.5 * (np.trace(R) - 1.0)
    theta = float(np.arctan2(s, c))
    if theta < SMALL_ANGLE:
        return 0.5 * v
    if np.pi - theta < PI_BRANCH_TOL:
        if warn:
            warnings.warn(
                "logmap at rotation angle ~pi: exponential coordinates are not unique",
                BranchAmbiguityWarning,
                stacklevel=2,
            )
        B = 0.5 * (R + np.eye(3))
        k = int(np.argmax(np.diag(B)))
        axis = B[:, k] / np.sqrt(max(B[k, k], 1e-300))
        axis = _canonical_axis_sign(axis / np.linalg.norm(axis))
        return theta * axis
    return theta / (2.0 * np.sin(theta)) * v


def logmap_batch(R: np.ndarray, warn: bool = True) -> np.ndarray:
    """Vectorised ``logmap`` over ``(N, 3, 3)``; near-pi rows fall back to ``logmap``."""
    R = np.asarray(R, dtype=float).reshape(-1, 3, 3)
    v = np.stack([R[:, 2, 1] - R[:, 1, 2], R[:, 0, 2] - R[:, 2, 0], R[:, 1, 0] - R[:, 0, 1]], axis=1)
    s = 0.5 * np.linalg.norm(v, axis=1)
    c = 0.5 * (np.trace(R, axis1=1, axis2=2) - 1.0)
    theta = np.arctan2(s, c)
    small = theta < SMALL_ANGLE
    near_pi = np.pi - theta < PI_BRANCH_TOL
    regular = ~(small | near_pi)
    out = np.zeros((len(R), 3))
    out[small] = 0.5 * v[small]
    th = theta[regular]
    out[regular] = (th / (2.0 * np.sin(th)))[:, None] * v[regular]
    for i in np.flatnonzero(near_pi):
        out[i] = logmap(R[i], warn)
    return out


def is_rotation(R, tol: float = 1e-9) -> bool:
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        return False
    return bool(np.all(np.abs(R.T @ R - np.eye(3)) <= tol) and abs(np.linalg.det(R) - 1.0) <= tol)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Haar-uniform rotation from a normalised Gaussian quaternion."""
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    return quat_to_matrix(q)


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform ``p_world = rotation @ p_body + translation``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.array(self.rotation, dtype=float).reshape(3, 3))
        object.__setattr__(self, "translation", np.array(self.translation, dtype=float).reshape(3))

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_matrix(cls, H) -> "Pose":
        H = np.asarray(H, dtype=float)
        return cls(H[:3, :3], H[:3, 3])

    def matrix(self) -> np.ndarray:
        H = np.eye(4)
        H[:3, :3] = self.rotation
        H[:3, 3] = self.translation
        return H

    def compose(self, other: "Pose") -> "Pose":
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def inverse(self) -> "Pose":
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.rotation.T + self.translation

    def __repr__(self) -> str:
        return f"Pose(t={self.translation.tolist()}, e={logmap(self.rotation).tolist()})"


def perturb_pose(H: Pose, eps) -> Pose:
    """Add ``eps[:3]`` to the translation and right-multiply the rotation by ``expmap(eps[3:])``."""
    eps = np.asarray(eps, dtype=float)
    return Pose(H.rotation @ expmap(eps[3:6]), H.translation + eps[0:3])


def encode_pose(H: Pose, warn: bool = True) -> np.ndarray:
    return np.concatenate([H.translation, logmap(H.rotation, warn)])


def decode_pose(x) -> Pose:
    x = np.asarray(x, dtype=float)
    return Pose(expmap(x[3:6]), x[0:3])


def canonicalize(x) -> np.ndarray:
    """Re-encode a pose vector so its rotation part has norm <= pi."""
    return encode_pose(decode_pose(x))


def relative_rotation_angle(R1, R2) -> float:
    """Angle in radians of ``R1.T @ R2``."""
    M = np.asarray(R1, dtype=float).T @ np.asarray(R2, dtype=float)
    v = vee(M - M.T)
    return float(np.arctan2(0.5 * np.linalg.norm(v), 0.5 * (np.trace(M) - 1.0)))
