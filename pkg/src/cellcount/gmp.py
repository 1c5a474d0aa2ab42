"""Global message passing: learned offset sampling and zero-parameter mean
aggregation over the sampled features.

Tensor layouts (batch-first):

    features   x        (N, C, H, W)
    offsets    omega    (N, H, W, K, 2)   last axis is (u, v) = (dx, dy)
    positions  s        (N, H, W, K, 2)   last axis is (x, y) = (col, row)
    sampled             (N, H, W, K, C)

Offsets are in feature-grid pixels.
"""

import torch
import torch.nn as nn

from cellcount.errors import ShapeError


def predict_offsets(x, w_u, w_v):
    """Per-head linear offsets: u = w_u . x_p, v = w_v . x_p, for every position p.

    ``w_u`` and ``w_v`` are (K, C); each row is one head's 1x1 convolution.
    """
    if x.dim() != 4:
        raise ShapeError(f"features must be (N, C, H, W), got {tuple(x.shape)}")
    C = x.shape[1]
    if w_u.shape != w_v.shape or w_u.dim() != 2 or w_u.shape[1] != C:
        raise ShapeError(
            f"offset weights {tuple(w_u.shape)}/{tuple(w_v.shape)} do not match {C} channels"
        )
    u = torch.einsum("nchw,kc->nhwk", x, w_u)
    v = torch.einsum("nchw,kc->nhwk", x, w_v)
    return torch.stack([u, v], dim=-1)


def base_grid(H, W, dtype=torch.float32, device=None):
    """(H, W, 1, 2) tensor holding each position's own (x, y)."""
    ys, xs = torch.meshgrid(torch.arange(H, dtype=dtype, device=device),
                            torch.arange(W, dtype=dtype, device=device), indexing="ij")
    return torch.stack([xs, ys], dim=-1)[:, :, None, :]


def sample_positions(offsets):
    """s = p + omega(p), clamped to [0, W-1] x [0, H-1]."""
    H, W = offsets.shape[1:3]
    # non-finite offsets would become invalid gather indices; the NaN still
    # propagates through the features themselves
    offsets = torch.nan_to_num(offsets, nan=0.0, posinf=float(max(H, W)), neginf=-float(max(H, W)))
    s = base_grid(H, W, offsets.dtype, offsets.device) + offsets
    return torch.stack([s[..., 0].clamp(0, W - 1), s[..., 1].clamp(0, H - 1)], dim=-1)


def bilinear_gather(x, s):
    """Bilinear read of ``x`` at continuous positions ``s``.

    Differentiable in both ``x`` and ``s``; ``s`` must already be clamped.
    """
    N, C, H, W = x.shape
    K = s.shape[3]
    sx, sy = s[..., 0], s[..., 1]
    x0 = sx.detach().floor()
    y0 = sy.detach().floor()
    fx = (sx - x0).unsqueeze(-1)
    fy = (sy - y0).unsqueeze(-1)
    x0 = x0.long()
    y0 = y0.long()
    x1 = (x0 + 1).clamp(max=W - 1)
    y1 = (y0 + 1).clamp(max=H - 1)

    flat = x.reshape(N, C, H * W).transpose(1, 2)  # (N, HW, C)

    def read(yy, xx):
        idx = (yy * W + xx).reshape(N, H * W * K, 1).expand(-1, -1, C)
        return flat.gather(1, idx).reshape(N, H, W, K, C)

    return ((1 - fy) * (1 - fx) * read(y0, x0) + (1 - fy) * fx * read(y0, x1)
            + fy * (1 - fx) * read(y1, x0) + fy * fx * read(y1, x1))


def aggregate(sampled):
    """Mean over the K samples of each position; returns (N, C, H, W)."""
    if sampled.shape[3] < 1:
        raise ShapeError("need at least one sample per position")
    if sampled.dtype in (torch.float16, torch.bfloat16, torch.float32):
        # a wider accumulator keeps the mean of K equal samples exact, so a
        # zero-offset module is an exact identity at any feature scale
        return sampled.mean(dim=3, dtype=torch.float64).to(sampled.dtype).permute(0, 3, 1, 2)
    return sampled.mean(dim=3).permute(0, 3, 1, 2)


def gmp_forward(x, w_u, w_v):
    s = sample_positions(predict_offsets(x, w_u, w_v))
    return aggregate(bilinear_gather(x, s))


def attention_reference(x, w, c_norm):
    """Dense weighted sum a_p = sum_q w[p, q] x_q / c_norm over all positions.

    Comparison baseline only; costs O((HW)^2 C).
    """
    N, C, H, W = x.shape
    if w.shape != (H * W, H * W):
        raise ShapeError(f"pairwise weights must be {(H * W, H * W)}, got {tuple(w.shape)}")
    if c_norm <= 0:
        raise ValueError("normalization constant must be positive")
    flat = x.reshape(N, C, H * W)
    return torch.einsum("pq,ncq->ncp", w, flat).reshape(N, C, H, W) / c_norm


class GlobalMessagePassing(nn.Module):
    """K offset heads with zero-initialized weights, so the module starts as
    an exact identity."""

    def __init__(self, channels, heads=8, residual=False):
        super().__init__()
        if heads < 1:
            raise ValueError("heads must be >= 1")
        self.heads = heads
        self.residual = residual
        self.w_u = nn.Parameter(torch.zeros(heads, channels))
        self.w_v = nn.Parameter(torch.zeros(heads, channels))

    def offsets(self, x):
        return predict_offsets(x, self.w_u, self.w_v)

    def forward(self, x):
        out = gmp_forward(x, self.w_u, self.w_v)
        return x + out if self.residual else out

    def extra_repr(self):
        return f"channels={self.w_u.shape[1]}, heads={self.heads}, residual={self.residual}"
