"""Label-preserving isometries applied jointly to image, dots and density map.

Pixel centres are at integer coordinates, so a horizontal flip maps
x -> W - 1 - x and a clockwise quarter turn maps (x, y) -> (H - 1 - y, x).
"""

import numpy as np

from cellcount.data.types import DensityMap, DotAnnotation, ImageSample
from cellcount.errors import ShapeError

OPS = ("identity", "hflip", "vflip", "rot90cw", "rot90ccw")


def _points(op, pts, H, W):
    x, y = pts[:, 0], pts[:, 1]
    if op == "hflip":
        out = np.stack([W - 1 - x, y], axis=1)
    elif op == "vflip":
        out = np.stack([x, H - 1 - y], axis=1)
    elif op == "rot90cw":
        out = np.stack([H - 1 - y, x], axis=1)
    else:
        out = np.stack([y, W - 1 - x], axis=1)
    # dots in the last half-pixel (x > W - 1) would land just below zero
    return np.maximum(out, 0.0)


def transform_array(op, a):
    """Apply ``op`` to the two leading (row, col) axes of ``a``."""
    if op == "identity":
        return a
    if op == "hflip":
        out = a[:, ::-1]
    elif op == "vflip":
        out = a[::-1]
    elif op == "rot90cw":
        out = np.rot90(a, k=-1, axes=(0, 1))
    elif op == "rot90ccw":
        out = np.rot90(a, k=1, axes=(0, 1))
    else:
        raise ValueError(f"unknown augmentation {op!r}; expected one of {OPS}")
    return np.ascontiguousarray(out)


def augment(sample, density, op):
    """Return (sample, density) transformed by the same isometry."""
    if op not in OPS:
        raise ValueError(f"unknown augmentation {op!r}; expected one of {OPS}")
    if op == "identity":
        return sample, density
    H, W = sample.shape
    if op.startswith("rot") and H != W:
        raise ShapeError(f"rotation requires a square input, got {H}x{W}")
    if density is not None and density.shape != (H, W):
        raise ShapeError(f"density map {density.shape} does not match image {(H, W)}")
    dots = DotAnnotation(_points(op, sample.dots.points, H, W))
    out = ImageSample(transform_array(op, sample.image), dots, sample.source_id,
                      sample.split, sample.parent_id)
    if density is not None:
        density = DensityMap(transform_array(op, density.values))
    return out, density
