"""Synthetic fluorescence-like cell images with known dot labels.

Defaults match the size and count statistics of the synthetic VGG cells set:
256 x 256 images with 174 +/- 64 overlapping cells at varying focus.
"""

from dataclasses import asdict, dataclass

import numpy as np

from cellcount import kernels
from cellcount.data.splits import assign_splits
from cellcount.data.types import DotAnnotation, ImageSample
from cellcount.errors import ConfigError

# RGB response of the fluorescent marker.
TINT = np.array([0.35, 0.55, 1.0])


@dataclass(frozen=True)
class SynthConfig:
    num_images: int = 200
    image_size: tuple = (256, 256)
    count_mean: float = 174.0
    count_std: float = 64.0
    cell_radius_range: tuple = (2.5, 4.5)
    blur_sigma_range: tuple = (0.4, 1.6)
    overlap_allowed: bool = True
    noise_std: float = 0.02
    seed: int = 0

    def validate(self):
        if self.num_images < 0:
            raise ConfigError(f"num_images must be >= 0, got {self.num_images}")
        if len(self.image_size) != 2 or min(self.image_size) < 1:
            raise ConfigError(f"image_size must be two positive ints, got {self.image_size}")
        if self.count_std < 0:
            raise ConfigError(f"count_std must be >= 0, got {self.count_std}")
        for name in ("cell_radius_range", "blur_sigma_range"):
            lo, hi = getattr(self, name)
            if lo <= 0 or lo > hi:
                raise ConfigError(f"{name} must satisfy 0 < min <= max, got {(lo, hi)}")
        if self.noise_std < 0:
            raise ConfigError(f"noise_std must be >= 0, got {self.noise_std}")
        return self

    def to_dict(self):
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        d["cell_radius_range"] = list(self.cell_radius_range)
        d["blur_sigma_range"] = list(self.blur_sigma_range)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("image_size", "cell_radius_range", "blur_sigma_range"):
            if key in d:
                d[key] = tuple(d[key])
        try:
            return cls(**d).validate()
        except TypeError as e:
            raise ConfigError(f"synth: {e}") from None


def _place(rng, n, H, W, radii, overlap_allowed):
    if overlap_allowed:
        return rng.uniform(0, W - 1, n), rng.uniform(0, H - 1, n)
    xs, ys = np.empty(n), np.empty(n)
    for i in range(n):
        for _ in range(1000):
            x, y = rng.uniform(0, W - 1), rng.uniform(0, H - 1)
            d2 = (xs[:i] - x) ** 2 + (ys[:i] - y) ** 2
            if np.all(d2 >= (radii[:i] + radii[i]) ** 2):
                break
        else:
            raise ConfigError(f"could not place {n} non-overlapping cells in {H}x{W}")
        xs[i], ys[i] = x, y
    return xs, ys


def _render(rng, cfg):
    H, W = cfg.image_size
    n = int(round(max(0.0, rng.normal(cfg.count_mean, cfg.count_std))))
    radii = rng.uniform(*cfg.cell_radius_range, n)
    blur = rng.uniform(*cfg.blur_sigma_range, n)
    amps = rng.uniform(0.5, 1.0, n)
    xs, ys = _place(rng, n, H, W, radii, cfg.overlap_allowed)
    canvas = np.zeros((H, W), dtype=np.float64)
    kernels.render_soft_disks(canvas, xs, ys, radii, blur, amps)
    # Saturating response keeps overlaps bright without clipping to a plateau.
    signal = 1.0 - np.exp(-1.2 * canvas)
    img = 0.04 + 0.9 * signal[:, :, None] * TINT
    img = img + rng.normal(0.0, cfg.noise_std, img.shape)
    img = np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0
    return img.astype(np.float32), DotAnnotation(np.stack([xs, ys], axis=1))


def generate_synthetic(config):
    """Render ``config.num_images`` samples; bit-identical for a fixed config."""
    cfg = config.validate()
    rng = np.random.default_rng(cfg.seed)
    rendered = [_render(rng, cfg) for _ in range(cfg.num_images)]
    ids = [f"synth_{i:05d}" for i in range(cfg.num_images)]
    splits = assign_splits(ids, cfg.seed)
    return [
        ImageSample(image=img, dots=dots, source_id=sid, split=splits[sid])
        for sid, (img, dots) in zip(ids, rendered)
    ]
