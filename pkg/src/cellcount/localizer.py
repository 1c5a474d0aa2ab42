"""Conditional density localizer: a small UNet fed the image plus the
counter's coarse map, upsampled to full resolution with its mass preserved."""

from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from cellcount import kernels
from cellcount.data.density import DEFAULT_SIGMA, peak_value
from cellcount.data.types import DotAnnotation
from cellcount.errors import ConfigError, ShapeError

COARSE_FACTOR = 8


@dataclass(frozen=True)
class LocalizerConfig:
    depth: int = 4
    base_width: int = 16
    in_channels: int = 3
    # Targets are multiplied by this before the MSE so per-pixel densities
    # (~1e-2 at sigma=3) are O(1) for the optimizer; predictions are divided back.
    density_scale: float = 100.0

    def validate(self):
        if self.depth < 1:
            raise ConfigError(f"localizer.depth must be >= 1, got {self.depth}")
        if self.base_width < 1:
            raise ConfigError(f"localizer.base_width must be >= 1, got {self.base_width}")
        if self.density_scale <= 0:
            raise ConfigError("localizer.density_scale must be positive")
        return self

    def to_dict(self):
        return asdict(self)


def condition_inputs(image, coarse):
    """Append the coarse map, bilinearly upsampled x8 and divided by 64, as a
    final channel. Bilinear upsampling by an integer factor with edge
    clamping spreads every coarse value over exactly 64 pixels of weight, so
    the channel total equals the coarse total."""
    if image.dim() != 4 or coarse.dim() != 4 or coarse.shape[1] != 1:
        raise ShapeError(
            f"expected image (N, C, H, W) and coarse (N, 1, h, w), "
            f"got {tuple(image.shape)} and {tuple(coarse.shape)}"
        )
    H, W = image.shape[-2:]
    h, w = coarse.shape[-2:]
    if (h * COARSE_FACTOR, w * COARSE_FACTOR) != (H, W) or image.shape[0] != coarse.shape[0]:
        raise ShapeError(f"coarse map {h}x{w} must be image {H}x{W} / {COARSE_FACTOR}")
    up = F.interpolate(coarse, size=(H, W), mode="bilinear", align_corners=False)
    return torch.cat([image, up / COARSE_FACTOR ** 2], dim=1)


def double_conv(cin, cout):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class UNet(nn.Module):
    def __init__(self, in_channels, base_width=16, depth=4):
        super().__init__()
        self.depth = depth
        widths = [base_width * 2 ** i for i in range(depth + 1)]
        self.down = nn.ModuleList([double_conv(in_channels, widths[0])])
        for i in range(depth):
            self.down.append(double_conv(widths[i], widths[i + 1]))
        self.up = nn.ModuleList()
        self.merge = nn.ModuleList()
        for i in reversed(range(depth)):
            self.up.append(nn.ConvTranspose2d(widths[i + 1], widths[i], 2, stride=2))
            self.merge.append(double_conv(2 * widths[i], widths[i]))
        self.out = nn.Conv2d(widths[0], 1, 1)

    def forward(self, x):
        skips = []
        for i, block in enumerate(self.down):
            x = block(x if i == 0 else F.max_pool2d(x, 2))
            skips.append(x)
        skips.pop()
        for up, merge in zip(self.up, self.merge):
            x = merge(torch.cat([skips.pop(), up(x)], dim=1))
        return self.out(x)


class Localizer(nn.Module):
    def __init__(self, cfg=LocalizerConfig()):
        super().__init__()
        self.cfg = cfg.validate()
        self.unet = UNet(cfg.in_channels + 1, cfg.base_width, cfg.depth)

    def forward(self, conditioned):
        """Scaled density prediction (N, 1, H, W); see ``density``."""
        H, W = conditioned.shape[-2:]
        m = 2 ** self.cfg.depth
        if H % m or W % m:
            raise ShapeError(f"input size {H}x{W} must be divisible by {m}")
        return F.relu(self.unet(conditioned))

    def density(self, conditioned):
        return self(conditioned) / self.cfg.density_scale


def localizer_loss(pred, gt):
    """Mean of squared per-pixel differences."""
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {tuple(pred.shape)} and target {tuple(gt.shape)} differ")
    return ((pred - gt) ** 2).mean()


def extract_peaks(density, min_distance=None, threshold=None, sigma=DEFAULT_SIGMA):
    """Dots at local maxima above ``threshold``, suppressed within ``min_distance``.

    Defaults scale with the rasterization width: threshold is a tenth of a
    single dot's peak height and min_distance is sigma.
    """
    values = getattr(density, "values", density)
    values = np.asarray(values, dtype=np.float64)
    if min_distance is None:
        min_distance = max(1, int(round(sigma)))
    if min_distance < 1:
        raise ValueError("min_distance must be >= 1")
    if threshold is None:
        threshold = 0.1 * peak_value(sigma)
    rc = kernels.peak_local_max(values, int(min_distance), threshold)
    return DotAnnotation(rc[:, ::-1].astype(np.float64))
