"""Compiled helpers for the point-cloud graph layers.

Torch's CPU kernels for gather-then-reduce over a small neighbour axis and
for top-k over short rows are dominated by overhead at the sizes used here,
so both are done in plain loops instead.
"""

from __future__ import annotations

import numba
import numpy as np
import torch


@numba.njit(cache=True)
def _k_smallest(d, k):
    """Per row of ``d`` (B, N, M), indices of the k smallest entries in ascending order.

    Ties go to the lower index.
    """
    B, N, M = d.shape
    out = np.empty((B, N, k), np.int64)
    best = np.empty(k, d.dtype)
    arg = np.empty(k, np.int64)
    for b in range(B):
        for n in range(N):
            filled = 0
            for m in range(M):
                v = d[b, n, m]
                if filled == k and not v < best[k - 1]:
                    continue
                pos = filled if filled < k else k - 1
                while pos > 0 and v < best[pos - 1]:
                    if pos < k:
                        best[pos] = best[pos - 1]
                        arg[pos] = arg[pos - 1]
                    pos -= 1
                best[pos] = v
                arg[pos] = m
                if filled < k:
                    filled += 1
            for s in range(k):
                out[b, n, s] = arg[s]
    return out


@numba.njit(cache=True)
def _neighbour_max(x, idx):
    B, N, C = x.shape
    k = idx.shape[2]
    out = np.empty((B, N, C), x.dtype)
    src = np.empty((B, N, C), np.int64)
    for b in range(B):
        for n in range(N):
            j0 = idx[b, n, 0]
            for c in range(C):
                out[b, n, c] = x[b, j0, c]
                src[b, n, c] = j0
            for s in range(1, k):
                j = idx[b, n, s]
                for c in range(C):
                    v = x[b, j, c]
                    if v > out[b, n, c]:
                        out[b, n, c] = v
                        src[b, n, c] = j
    return out, src


def k_smallest(d: torch.Tensor, k: int) -> torch.Tensor:
    return torch.from_numpy(_k_smallest(d.detach().contiguous().numpy(), k))


class NeighbourMax(torch.autograd.Function):
    """``out[b, n, c] = max_s x[b, idx[b, n, s], c]``; the gradient goes to the first maximiser."""

    @staticmethod
    def forward(ctx, x, idx):
        out, src = _neighbour_max(x.detach().contiguous().numpy(), idx.contiguous().numpy())
        src = torch.from_numpy(src)
        ctx.save_for_backward(src)
        ctx.n = x.shape[1]
        return torch.from_numpy(out)

    @staticmethod
    def backward(ctx, grad):
        (src,) = ctx.saved_tensors
        B, _, C = grad.shape
        g = grad.new_zeros((B, ctx.n, C)).scatter_add_(1, src, grad.contiguous())
        return g, None


def neighbour_max(x: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
    return NeighbourMax.apply(x, idx)
