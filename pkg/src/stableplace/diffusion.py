"""Noise schedule, SE(3)-aware forward noising, training objective and reverse sampler.

All pose vectors here live in normalized workspace coordinates (see
:func:`stableplace.scene.frame_for`). The network output convention is:

* ``epsilon``: the network predicts the unit-scale noise ``eps / sigma_t``;
  the loss is the mean over the 6 channels of the squared error, so a model
  that always outputs zero has expected loss exactly 1.
* ``x0``: the network predicts the clean pose vector directly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .scene import DEFAULT_N_PTS, Scene, build_augmented_cloud, frame_for, sample_body_clouds
from .se3 import Pose, decode_pose, encode_pose, expmap_batch, logmap_batch
from .shapes import ShapeCatalog, default_catalog

PARAMETERIZATIONS = ("epsilon", "x0")
DIVERGENCE_LIMIT = 10.0  # normalized units, i.e. 10x the workspace scale


class SamplingFault(RuntimeError):
    pass


class TrainingFault(RuntimeError):
    def __init__(self, message, batch=None):
        super().__init__(message)
        self.batch = batch


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Ascending noise scales ``sigma_1 .. sigma_T``; ``sigma(0) = 0``."""

    sigmas: np.ndarray

    def __post_init__(self):
        s = np.array(self.sigmas, dtype=float).reshape(-1)
        if len(s) < 1 or s[0] <= 0 or np.any(np.diff(s) <= 0):
            raise ValueError("noise scales must be positive and strictly increasing")
        object.__setattr__(self, "sigmas", s)

    @classmethod
    def geometric(cls, sigma_min: float = 0.01, sigma_max: float = 1.5, T: int = 100) -> "NoiseSchedule":
        if T == 1:
            return cls(np.array([sigma_max]))
        return cls(np.geomspace(sigma_min, sigma_max, T))

    @property
    def T(self) -> int:
        return len(self.sigmas)

    def sigma(self, t):
        t = np.asarray(t)
        padded = np.concatenate([[0.0], self.sigmas])
        return padded[t]

    def to_dict(self) -> dict:
        return {"sigmas": [float(s) for s in self.sigmas]}

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSchedule":
        return cls(np.array(d["sigmas"], dtype=float))

    def __eq__(self, other):
        return isinstance(other, NoiseSchedule) and np.array_equal(self.sigmas, other.sigmas)


@dataclass(frozen=True)
class DiffusionConfig:
    schedule: NoiseSchedule = field(default_factory=NoiseSchedule.geometric)
    parameterization: str = "epsilon"
    seed: int = 0

    def __post_init__(self):
        if self.parameterization not in PARAMETERIZATIONS:
            raise ValueError(f"parameterization must be one of {PARAMETERIZATIONS}")

    def to_dict(self) -> dict:
        return {"schedule": self.schedule.to_dict(), "parameterization": self.parameterization, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "DiffusionConfig":
        return cls(NoiseSchedule.from_dict(d["schedule"]), d["parameterization"], int(d.get("seed", 0)))


# --------------------------------------------------------------------------
# pose-vector arithmetic


def perturb_vec(x: np.ndarray, eps: np.ndarray) -> np.ndarray:
    """Batched ``encode(perturb_pose(decode(x), eps))`` over ``(B, 6)`` arrays."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    eps = np.atleast_2d(np.asarray(eps, dtype=float))
    R = expmap_batch(x[:, 3:]) @ expmap_batch(eps[:, 3:])
    return np.concatenate([x[:, :3] + eps[:, :3], logmap_batch(R, warn=False)], axis=1)


def add_noise(x0, t: int, rng: np.random.Generator, schedule: NoiseSchedule, eps=None):
    """Noise a pose vector at step ``t``; returns ``(x_t, eps)`` with ``eps ~ N(0, sigma_t^2 I)``."""
    if not 1 <= t <= schedule.T:
        raise ValueError(f"t must lie in [1, {schedule.T}]")
    x0 = np.asarray(x0, dtype=float)
    if eps is None:
        eps = schedule.sigma(t) * rng.standard_normal(6)
    eps = np.asarray(eps, dtype=float)
    return perturb_vec(x0, eps)[0], eps


def x0_from_prediction(x_t: np.ndarray, raw: np.ndarray, sigma_t, parameterization: str) -> np.ndarray:
    """Clean-pose estimate from the network output; epsilon is undone by applying ``-eps_hat``."""
    raw = np.atleast_2d(raw)
    if parameterization == "epsilon":
        eps_hat = np.asarray(sigma_t, dtype=float).reshape(-1, 1) * raw
        return perturb_vec(x_t, -eps_hat)
    return perturb_vec(raw, np.zeros_like(raw))


def _call_model(model, clouds, x_t, t):
    fn = getattr(model, "predict", None) or model
    return np.asarray(fn(clouds, x_t, t), dtype=float)


# --------------------------------------------------------------------------
# training


@dataclass
class TrainingBatch:
    clouds: np.ndarray  # (B, N, 5), normalized
    x_t: np.ndarray  # (B, 6)
    t: np.ndarray  # (B,) integer steps in [1, T]
    target: np.ndarray  # (B, 6)
    eps: np.ndarray  # (B, 6) raw noise in normalized units
    x0: np.ndarray  # (B, 6)


def sample_training_batch(
    scenes: list[Scene],
    rng: np.random.Generator,
    config: DiffusionConfig,
    n_pts: int = DEFAULT_N_PTS,
    catalog: ShapeCatalog | None = None,
    t=None,
) -> TrainingBatch:
    """Noise each scene's query pose and rebuild its cloud at the noisy pose.

    All scenes must hold the same number of objects.
    """
    catalog = catalog or default_catalog()
    sched = config.schedule
    B = len(scenes)
    ts = rng.integers(1, sched.T + 1, size=B) if t is None else np.broadcast_to(np.asarray(t), (B,)).copy()
    clouds, xts, x0s, epss = [], [], [], []
    for scene, ti in zip(scenes, ts):
        frame = frame_for(scene)
        # resting upside-down blocks sit exactly on the pi branch, so no warning here
        x0 = encode_pose(frame.to_normalized(scene.query.pose), warn=False)
        eps = sched.sigma(ti) * rng.standard_normal(6)
        x_t = perturb_vec(x0, eps)[0]
        noisy = frame.to_world(decode_pose(x_t))
        cloud = build_augmented_cloud(scene, noisy, n_pts, rng, catalog)
        clouds.append(frame.normalize_cloud(cloud.rows))
        xts.append(x_t)
        x0s.append(x0)
        epss.append(eps)
    x0s, epss = np.array(x0s), np.array(epss)
    target = epss / sched.sigma(ts)[:, None] if config.parameterization == "epsilon" else x0s
    return TrainingBatch(np.stack(clouds), np.array(xts), ts, target, epss, x0s)


def training_loss(
    model,
    scene: Scene,
    rng: np.random.Generator,
    config: DiffusionConfig | None = None,
    n_pts: int = DEFAULT_N_PTS,
    catalog: ShapeCatalog | None = None,
):
    """Mean squared prediction error with every object of ``scene`` taking a turn as the query.

    Returns a torch scalar for torch modules (so it can be differentiated) and
    a float otherwise.
    """
    config = config or DiffusionConfig()
    batch = sample_training_batch([scene.with_query(i) for i in range(len(scene))], rng, config, n_pts, catalog)
    try:
        import torch
    except ImportError:  # pragma: no cover
        torch = None
    if torch is not None and isinstance(model, torch.nn.Module):
        p = next(model.parameters())
        pred = model(
            torch.as_tensor(batch.clouds, dtype=p.dtype),
            torch.as_tensor(batch.x_t, dtype=p.dtype),
            torch.as_tensor(batch.t),
        )
        loss = ((pred - torch.as_tensor(batch.target, dtype=p.dtype)) ** 2).mean()
        if not torch.isfinite(loss):
            raise TrainingFault("non-finite training loss", batch)
        return loss
    pred = _call_model(model, batch.clouds, batch.x_t, batch.t)
    loss = float(np.mean((pred - batch.target) ** 2))
    if not np.isfinite(loss):
        raise TrainingFault("non-finite training loss", batch)
    return loss


# --------------------------------------------------------------------------
# sampling


def reverse_diffusion(denoise, x_T: np.ndarray, config: DiffusionConfig, rngs) -> np.ndarray:
    """Iterate ``x0_hat = D(x_t, t)``, ``x_{t-1} = x0_hat (+) sigma_{t-1} eps`` from ``t = T`` down to 1.

    ``denoise(x_t, t)`` returns the raw network output for a ``(B, 6)`` batch;
    ``rngs`` holds one generator per batch row.
    """
    sched = config.schedule
    x = np.array(x_T, dtype=float).reshape(-1, 6)
    for t in range(sched.T, 0, -1):
        if not np.all(np.isfinite(x)) or np.abs(x[:, :3]).max() > DIVERGENCE_LIMIT:
            raise SamplingFault(f"reverse diffusion diverged at t={t}")
        raw = denoise(x, t)
        x0_hat = x0_from_prediction(x, raw, np.full(len(x), sched.sigma(t)), config.parameterization)
        if t > 1:
            eps = sched.sigma(t - 1) * np.array([r.standard_normal(6) for r in rngs])
            x = perturb_vec(x0_hat, eps)
        else:
            x = x0_hat
    if not np.all(np.isfinite(x)):
        raise SamplingFault("reverse diffusion produced non-finite poses")
    return x


def reverse_sample_batch(
    model,
    scenes: list[Scene],
    rngs: list[np.random.Generator],
    config: DiffusionConfig,
    n_pts: int = DEFAULT_N_PTS,
    catalog: ShapeCatalog | None = None,
    trace: list | None = None,
) -> list[Pose]:
    """Generate a world-frame pose for the query block of each scene.

    The query object's stored pose is ignored. All scenes must share the same
    object count. The augmented cloud is rebuilt at every step.
    """
    catalog = catalog or default_catalog()
    sched = config.schedule
    frames = [frame_for(s) for s in scenes]
    bodies = [sample_body_clouds(s, n_pts, r, catalog) for s, r in zip(scenes, rngs)]
    x_T = np.array([sched.sigmas[-1] * r.standard_normal(6) for r in rngs])
    x_T = perturb_vec(np.zeros_like(x_T), x_T)

    def denoise(x, t):
        clouds = []
        for s, f, b, xi in zip(scenes, frames, bodies, x):
            cloud = build_augmented_cloud(s, f.to_world(decode_pose(xi)), n_pts, catalog=catalog, body_clouds=b)
            clouds.append(f.normalize_cloud(cloud.rows))
        if trace is not None:
            trace.append((t, x.copy()))
        return _call_model(model, np.stack(clouds), x, np.full(len(x), t))

    x0 = reverse_diffusion(denoise, x_T, config, rngs)
    return [f.to_world(decode_pose(xi)) for f, xi in zip(frames, x0)]


def reverse_sample(model, scene: Scene, rng: np.random.Generator, config: DiffusionConfig | None = None,
                   n_pts: int = DEFAULT_N_PTS, catalog: ShapeCatalog | None = None) -> Pose:
    config = config or DiffusionConfig()
    return reverse_sample_batch(model, [scene], [rng], config, n_pts, catalog)[0]
