"""Geometry normalization to 256-pixel tiles.

Only geometry is rescaled; dot counts are never interpolated. Resizing maps
a dot coordinate ``x`` to ``x * scale``.
"""

import math

import numpy as np
import torch
import torch.nn.functional as F

from cellcount.data.types import DotAnnotation, ImageSample
from cellcount.errors import ShapeError

TILE = 256


def resize_image(image, size):
    """Bilinear (antialiased) resize of an H x W x C float image to ``size``."""
    H, W = size
    if image.shape[:2] == (H, W):
        return image.copy()
    t = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32)).permute(2, 0, 1)[None]
    out = F.interpolate(t, size=(H, W), mode="bilinear", align_corners=False, antialias=True)
    return out[0].permute(1, 2, 0).clamp(0.0, 1.0).numpy().copy()


def _clip_below(v, upper):
    # keeps coordinates strictly inside the half-open interval [0, upper)
    return np.minimum(v, np.nextafter(upper, 0.0))


def resize_sample(sample, size):
    H, W = sample.shape
    sy, sx = size[0] / H, size[1] / W
    pts = sample.dots.points * np.array([sx, sy])
    pts[:, 0] = _clip_below(pts[:, 0], size[1])
    pts[:, 1] = _clip_below(pts[:, 1], size[0])
    return ImageSample(resize_image(sample.image, size), DotAnnotation(pts),
                       sample.source_id, sample.split, sample.parent_id)


def nearest_multiple(side, tile=TILE):
    """k with k * tile closest to ``side``; ties round up, k >= 1."""
    return max(1, math.floor(side / tile + 0.5))


def pad_to_square(sample):
    H, W, C = sample.image.shape
    side = max(H, W)
    if H == W:
        return sample
    img = np.zeros((side, side, C), dtype=sample.image.dtype)
    img[:H, :W] = sample.image
    return ImageSample(img, sample.dots, sample.source_id, sample.split, sample.parent_id)


def cut_tiles(sample, tile, grid, parent_id):
    """Split into a grid of non-overlapping tiles; dots use half-open ownership."""
    rows, cols = grid
    H, W = sample.shape
    if H != rows * tile or W != cols * tile:
        raise ShapeError(f"image {H}x{W} does not split into {rows}x{cols} tiles of {tile}")
    pts = sample.dots.points
    c_idx = np.minimum(np.floor(pts[:, 0] / tile).astype(int), cols - 1)
    r_idx = np.minimum(np.floor(pts[:, 1] / tile).astype(int), rows - 1)
    out = []
    for r in range(rows):
        for c in range(cols):
            sel = (r_idx == r) & (c_idx == c)
            local = pts[sel] - np.array([c * tile, r * tile])
            local = _clip_below(np.maximum(local, 0.0), tile)
            img = np.ascontiguousarray(sample.image[r * tile:(r + 1) * tile,
                                                    c * tile:(c + 1) * tile])
            out.append(ImageSample(img, DotAnnotation(local),
                                   f"{parent_id}_r{r}c{c}", sample.split, parent_id))
    return out


def pad_and_tile(sample, tile=TILE):
    """Pad to square, resize to the nearest multiple of ``tile`` and cut a k x k grid."""
    if sample.image.size == 0:
        raise ShapeError("image is empty")
    sq = pad_to_square(sample)
    side = sq.shape[0]
    k = nearest_multiple(side, tile)
    if k * tile != side:
        sq = resize_sample(sq, (k * tile, k * tile))
    return cut_tiles(sq, tile, (k, k), sample.group_id)


def resize_to_tile(sample, tile=TILE):
    """Direct resize, used for fixed-size sets such as ADI (150 x 150)."""
    out = resize_sample(sample, (tile, tile))
    out.parent_id = sample.group_id
    out.source_id = f"{sample.group_id}_r0c0"
    return [out]


def quadrants_to_tile(sample, tile=TILE):
    """Four equal patches, each resized to ``tile`` (MBM-style 600 -> 4 x 300 -> 256)."""
    H, W = sample.shape
    if H != W or H % 2:
        raise ShapeError(f"quadrant split needs a square image with even side, got {H}x{W}")
    patches = cut_tiles(sample, H // 2, (2, 2), sample.group_id)
    return [resize_sample(p, (tile, tile)) for p in patches]


PREPROCESSORS = {
    "tile": pad_and_tile,
    "resize": resize_to_tile,
    "quadrants": quadrants_to_tile,
}
