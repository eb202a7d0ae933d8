"""Graph-convolution pointcloud encoder and MLP denoising head."""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from ._graphkernels import k_smallest, neighbour_max

KNN_DIMS = (0, 1, 2, 4)  # x, y, z, query flag; the SDF column is not part of the first graph metric


class GradientFault(RuntimeError):
    pass


@dataclass(frozen=True)
class DenoiserConfig:
    k_nn: int = 16
    edge_conv_widths: tuple[int, ...] = (64, 64, 128, 256)
    latent_dim: int = 512
    mlp_widths: tuple[int, ...] = (256, 256)
    use_sdf: bool = True
    use_pose: bool = True
    dtype: str = "float64"
    # head emits the rotation part in world axes; see Denoiser.forward
    world_frame_rotation: bool = True

    def __post_init__(self):
        object.__setattr__(self, "edge_conv_widths", tuple(int(w) for w in self.edge_conv_widths))
        object.__setattr__(self, "mlp_widths", tuple(int(w) for w in self.mlp_widths))
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @property
    def torch_dtype(self):
        return torch.float64 if self.dtype == "float64" else torch.float32

    def to_dict(self) -> dict:
        d = asdict(self)
        d["edge_conv_widths"] = list(self.edge_conv_widths)
        d["mlp_widths"] = list(self.mlp_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        return cls(**d)


def knn_indices(feats: torch.Tensor, k: int) -> torch.Tensor:
    """Indices ``(B, N, k)`` of the k nearest rows (self included) under Euclidean distance."""
    with torch.no_grad():
        sq = (feats * feats).sum(-1)
        d = sq[:, :, None] + sq[:, None, :] - 2.0 * feats @ feats.transpose(1, 2)
        return k_smallest(d, k)


def rotate_by_inverse(w: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """``expmap(w)^T v`` row by row (Rodrigues on vectors)."""
    th2 = (w * w).sum(-1, keepdim=True)
    small = th2 < 1e-8
    th = torch.sqrt(torch.where(small, torch.ones_like(th2), th2))
    a = torch.where(small, 1 - th2 / 6, torch.sin(th) / th)
    b = torch.where(small, 0.5 - th2 / 24, (1 - torch.cos(th)) / torch.where(small, torch.ones_like(th2), th2))
    wxv = torch.linalg.cross(w, v, dim=-1)
    return v - a * wxv + b * torch.linalg.cross(w, wxv, dim=-1)


class EdgeConv(nn.Module):
    """Edge convolution with a single shared linear layer and max aggregation.

    The edge feature ``W [x_i, x_j - x_i] + b`` splits into a centre term and a
    neighbour term; because the activation is monotone, the max over
    neighbours can be taken on the neighbour term before activating.
    """

    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.c_in = c_in
        self.lin = nn.Linear(2 * c_in, c_out)
        self.act = nn.LeakyReLU(0.2)

    def forward(self, x: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
        W = self.lin.weight
        Wc, Wn = W[:, : self.c_in], W[:, self.c_in :]
        centre = x @ (Wc - Wn).T + self.lin.bias
        neigh = x @ Wn.T  # (B, N, C)
        return self.act(centre + neighbour_max(neigh, idx))


class Denoiser(nn.Module):
    """Maps (augmented cloud, noisy pose vector, step) to a 6-vector."""

    def __init__(self, config: DenoiserConfig, sigmas):
        super().__init__()
        self.config = config
        dt = config.torch_dtype
        self.register_buffer("sigmas", torch.as_tensor(np.asarray(sigmas, dtype=float), dtype=dt), persistent=False)
        widths = (5,) + config.edge_conv_widths
        self.convs = nn.ModuleList(EdgeConv(a, b) for a, b in zip(widths[:-1], widths[1:]))
        self.project = nn.Linear(sum(config.edge_conv_widths), config.latent_dim)
        head_in = config.latent_dim + (6 if config.use_pose else 0) + 2
        dims = (head_in,) + config.mlp_widths + (6,)
        self.head = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))
        self.to(dt)
        self._warned_k = False

    @property
    def T(self) -> int:
        return len(self.sigmas)

    def encode(self, cloud: torch.Tensor) -> torch.Tensor:
        """Latent vector ``(B, latent_dim)`` of a ``(B, N, 5)`` cloud."""
        if cloud.dim() == 2:
            cloud = cloud.unsqueeze(0)
        x = cloud
        if not self.config.use_sdf:
            x = x.clone()
            x[..., 3] = 0.0
        N = x.shape[1]
        k = self.config.k_nn
        if N <= k:
            k = max(N - 1, 1)
            if not self._warned_k:
                warnings.warn(f"cloud has {N} points; k_nn clipped to {k}", stacklevel=2)
                self._warned_k = True
        outs = []
        idx = knn_indices(x[..., list(KNN_DIMS)], k)
        for i, conv in enumerate(self.convs):
            if i > 0:
                idx = knn_indices(x, k)
            x = conv(x, idx)
            outs.append(x)
        pooled = torch.cat(outs, dim=-1).max(dim=1).values
        return self.project(pooled)

    def t_embed(self, t: torch.Tensor) -> torch.Tensor:
        t = torch.as_tensor(t).long()
        return torch.stack([t.to(self.sigmas.dtype) / self.T, torch.log(self.sigmas[t - 1])], dim=-1)

    def head_forward(self, z: torch.Tensor, x_t: torch.Tensor, t) -> torch.Tensor:
        parts = [z] + ([x_t] if self.config.use_pose else []) + [self.t_embed(t)]
        h = torch.cat(parts, dim=-1)
        for i, layer in enumerate(self.head):
            h = layer(h)
            if i < len(self.head) - 1:
                h = torch.relu(h)
        return h

    def forward(self, cloud: torch.Tensor, x_t: torch.Tensor, t) -> torch.Tensor:
        """Noise estimate with its rotation part in the body frame of ``x_t``.

        With ``R_t = R_0 exp(e)`` the world-frame tilt ``R_t e`` is what the
        posed query cloud shows directly. When ``world_frame_rotation`` is set
        the head predicts that vector and ``R_t^T`` maps it back; the map is
        orthogonal, so losses are unchanged. The no-pose ablation skips it
        because it reads the noisy pose.
        """
        out = self.head_forward(self.encode(cloud), x_t, t)
        if self.config.world_frame_rotation and self.config.use_pose:
            out = torch.cat([out[:, :3], rotate_by_inverse(x_t[:, 3:], out[:, 3:])], dim=-1)
        return out

    @torch.no_grad()
    def predict(self, clouds, x_t, t, chunk: int = 32) -> np.ndarray:
        dt = self.config.torch_dtype
        clouds = np.asarray(clouds)
        x_t = np.asarray(x_t)
        t = np.asarray(t)
        out = []
        for s in range(0, len(clouds), chunk):
            out.append(
                self(
                    torch.as_tensor(clouds[s : s + chunk], dtype=dt),
                    torch.as_tensor(x_t[s : s + chunk], dtype=dt),
                    torch.as_tensor(t[s : s + chunk]),
                ).double().numpy()
            )
        return np.concatenate(out) if out else np.zeros((0, 6))


def build_denoiser(config: DenoiserConfig, sigmas, seed: int = 0) -> Denoiser:
    """Construct with deterministic initial weights drawn from ``seed``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return Denoiser(config, sigmas)


def zero_weights(model: nn.Module) -> None:
    with torch.no_grad():
        for p in model.parameters():
            p.zero_()


def gradient(loss_fn, model: nn.Module) -> dict[str, torch.Tensor]:
    """Reverse-mode gradient of the scalar ``loss_fn()`` w.r.t. every named parameter."""
    model.zero_grad(set_to_none=True)
    loss = loss_fn()
    if not isinstance(loss, torch.Tensor):
        loss = torch.as_tensor(float(loss))
    grads = {}
    if loss.requires_grad:
        loss.backward()
    for name, p in model.named_parameters():
        g = p.grad if p.grad is not None else torch.zeros_like(p)
        if not torch.all(torch.isfinite(g)):
            raise GradientFault(f"non-finite gradient for {name}")
        grads[name] = g.detach().clone()
    return grads


def spectral_lipschitz_bound(model: Denoiser) -> float:
    """Product of spectral norms of the head's pose-facing weight blocks.

    Bounds how much the output can change per unit change of ``x_t``.
    """
    bound = 1.0
    latent = model.config.latent_dim
    for i, layer in enumerate(model.head):
        W = layer.weight.detach().double()
        if i == 0:
            W = W[:, latent : latent + 6]
        bound *= float(torch.linalg.matrix_norm(W, ord=2))
    return bound


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())

