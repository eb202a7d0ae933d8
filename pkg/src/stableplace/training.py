"""Minibatch training of the denoiser on a set of stable scenes."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from importlib import resources

import numpy as np
import torch

from .checkpoint import Checkpoint
from .denoiser import DenoiserConfig, build_denoiser
from .diffusion import DiffusionConfig, TrainingFault, sample_training_batch
from .scene import Scene
from .shapes import ShapeCatalog, default_catalog

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 10000
    batch_size: int = 32
    lr: float = 1e-4
    n_pts: int = 64
    val_fraction: float = 0.05
    val_every: int = 500
    val_batches: int = 4
    ckpt_every_epochs: int = 5
    seed: int = 0
    reference: bool = True
    lr_schedule: str = "constant"  # or "cosine": decay to zero over ``steps``
    ema: float = 0.0  # weight averaging factor; 0 disables, checkpoints hold the average otherwise

    def __post_init__(self):
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError("lr_schedule must be 'constant' or 'cosine'")
        if not 0.0 <= self.ema < 1.0:
            raise ValueError("ema must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


def load_profile(name: str) -> tuple[DenoiserConfig, TrainConfig]:
    profiles = json.loads(resources.files("stableplace").joinpath("data/profiles.json").read_text())
    if name not in profiles:
        raise ValueError(f"unknown profile {name!r}; available: {sorted(profiles)}")
    p = profiles[name]
    return DenoiserConfig(**p["denoiser"]), TrainConfig(**p["train"])


@dataclass
class TrainHistory:
    losses: list[float] = field(default_factory=list)
    val: list[tuple[int, float]] = field(default_factory=list)
    seconds: float = 0.0


def set_reference_mode() -> None:
    """Single-threaded, deterministic kernels: equal seeds give bit-identical runs."""
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)


def split_scenes(scenes: list[Scene], val_fraction: float, rng: np.random.Generator):
    order = rng.permutation(len(scenes))
    n_val = int(round(val_fraction * len(scenes))) if len(scenes) > 1 else 0
    n_val = min(max(n_val, 1 if val_fraction > 0 and len(scenes) > 1 else 0), len(scenes) - 1)
    val = [scenes[i] for i in sorted(order[:n_val])]
    train = [scenes[i] for i in sorted(order[n_val:])]
    return train, val


class BucketSampler:
    """Draws same-size minibatches; scenes with different block counts give different cloud sizes."""

    def __init__(self, scenes: list[Scene], batch_size: int):
        self.batch_size = batch_size
        self.buckets: dict[int, list[Scene]] = {}
        for s in scenes:
            self.buckets.setdefault(len(s), []).append(s)
        self.sizes = sorted(self.buckets)
        counts = np.array([len(self.buckets[k]) for k in self.sizes], dtype=float)
        self.p = counts / counts.sum()

    def draw(self, rng: np.random.Generator) -> list[Scene]:
        """A minibatch with a random query object per scene."""
        key = self.sizes[int(rng.choice(len(self.sizes), p=self.p))]
        pool = self.buckets[key]
        idx = rng.choice(len(pool), size=self.batch_size, replace=len(pool) < self.batch_size)
        return [pool[i].with_query(int(rng.integers(key))) for i in idx]


def _tensor_batch(batch, dtype):
    return (
        torch.as_tensor(batch.clouds, dtype=dtype),
        torch.as_tensor(batch.x_t, dtype=dtype),
        torch.as_tensor(batch.t),
        torch.as_tensor(batch.target, dtype=dtype),
    )


def train(
    scenes: list[Scene],
    denoiser_cfg: DenoiserConfig,
    train_cfg: TrainConfig,
    diffusion_cfg: DiffusionConfig | None = None,
    catalog: ShapeCatalog | None = None,
    out=None,
    meta: dict | None = None,
    progress=None,
) -> tuple[Checkpoint, TrainHistory]:
    """Fit a fresh denoiser with Adam; returns the final checkpoint and the loss history.

    When ``out`` is given a checkpoint is written every ``ckpt_every_epochs``
    epochs and at the end. A non-finite loss stops training, writes the last
    good weights and raises :class:`TrainingFault`.
    """
    if not scenes:
        raise ValueError("training needs at least one scene")
    catalog = catalog or default_catalog()
    diffusion_cfg = diffusion_cfg or DiffusionConfig(seed=train_cfg.seed)
    if diffusion_cfg.parameterization == "x0" and denoiser_cfg.world_frame_rotation:
        raise ValueError("world_frame_rotation only applies to epsilon prediction")
    if train_cfg.reference:
        set_reference_mode()
    rng = np.random.default_rng(np.random.SeedSequence(entropy=train_cfg.seed, spawn_key=(0,)))
    val_rng = np.random.default_rng(np.random.SeedSequence(entropy=train_cfg.seed, spawn_key=(1,)))
    train_scenes, val_scenes = split_scenes(scenes, train_cfg.val_fraction, rng)
    model = build_denoiser(denoiser_cfg, diffusion_cfg.schedule.sigmas, seed=train_cfg.seed)
    dtype = denoiser_cfg.torch_dtype
    opt = torch.optim.Adam(model.parameters(), lr=train_cfg.lr)
    sched = None
    if train_cfg.lr_schedule == "cosine":
        sched = torch.optim.lr_scheduler.LambdaLR(
            opt, lambda i: 0.5 * (1.0 + math.cos(math.pi * min(i, train_cfg.steps) / train_cfg.steps)))
    averaged = torch.optim.swa_utils.AveragedModel(
        model, multi_avg_fn=torch.optim.swa_utils.get_ema_multi_avg_fn(train_cfg.ema)) if train_cfg.ema else None
    shown = averaged.module if averaged is not None else model
    sampler = BucketSampler(train_scenes, train_cfg.batch_size)

    # a fixed validation set makes successive validation losses comparable
    val_batches = []
    if val_scenes:
        vsampler = BucketSampler(val_scenes, train_cfg.batch_size)
        for _ in range(train_cfg.val_batches):
            b = sample_training_batch(vsampler.draw(val_rng), val_rng, diffusion_cfg, train_cfg.n_pts, catalog)
            val_batches.append(_tensor_batch(b, dtype))

    meta = dict(meta or {})
    meta.update(train=train_cfg.to_dict(), n_train=len(train_scenes), n_val=len(val_scenes))
    steps_per_epoch = max(1, math.ceil(len(train_scenes) / train_cfg.batch_size))
    ckpt_every = steps_per_epoch * train_cfg.ckpt_every_epochs
    hist = TrainHistory()

    def snapshot(step):
        return Checkpoint.from_model(shown, diffusion_cfg, catalog.hash, {**meta, "step": step})

    def validate():
        if not val_batches:
            return float("nan")
        shown.eval()
        with torch.no_grad():
            tot = sum(float(((shown(c, x, t) - y) ** 2).mean()) for c, x, t, y in val_batches)
        shown.train()
        return tot / len(val_batches)

    last_good = snapshot(0)
    t0 = time.perf_counter()
    model.train()
    for step in range(1, train_cfg.steps + 1):
        batch = sample_training_batch(sampler.draw(rng), rng, diffusion_cfg, train_cfg.n_pts, catalog)
        c, x, t, y = _tensor_batch(batch, dtype)
        loss = ((model(c, x, t) - y) ** 2).mean()
        if not torch.isfinite(loss):
            if out is not None:
                last_good.save(out)
            raise TrainingFault(f"non-finite loss at step {step}", batch)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        if sched is not None:
            sched.step()
        if averaged is not None:
            averaged.update_parameters(model)
        hist.losses.append(loss.item())
        if step % train_cfg.val_every == 0 or step == train_cfg.steps:
            v = validate()
            hist.val.append((step, v))
            log.info("step %d  train %.4f  val %.4f  (%.0fs)", step, np.mean(hist.losses[-train_cfg.val_every:]), v,
                     time.perf_counter() - t0)
            if progress:
                progress(step, hist)
        if step % ckpt_every == 0:
            last_good = snapshot(step)
            if out is not None:
                last_good.save(out)
    hist.seconds = time.perf_counter() - t0
    # wall-clock time stays out of the checkpoint so reruns are byte-identical
    meta["final_val_loss"] = hist.val[-1][1] if val_batches else None
    final = snapshot(train_cfg.steps)
    if out is not None:
        final.save(out)
    return final, hist
