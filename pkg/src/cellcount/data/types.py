from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from cellcount.errors import AnnotationError, ShapeError

SPLITS = ("train", "test", "val")


class DotAnnotation:
    """Per-cell point labels as an (N, 2) array of (x, y) pixel coordinates.

    x is the column and y the row; pixel centres sit at integer coordinates.
    """

    __slots__ = ("points",)

    def __init__(self, points=()):
        pts = np.asarray(points, dtype=np.float64)
        if pts.size == 0:
            pts = np.zeros((0, 2), dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise AnnotationError(f"points must have shape (N, 2), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise AnnotationError("points contain non-finite coordinates")
        self.points = pts

    def count(self):
        return len(self.points)

    def __len__(self):
        return len(self.points)

    def __eq__(self, other):
        return isinstance(other, DotAnnotation) and np.array_equal(self.points, other.points)

    def __repr__(self):
        return f"DotAnnotation(n={len(self.points)})"

    def check_bounds(self, shape):
        """Raise AnnotationError naming the first point outside [0, W) x [0, H)."""
        H, W = shape[:2]
        x, y = self.points[:, 0], self.points[:, 1]
        bad = np.nonzero((x < 0) | (x >= W) | (y < 0) | (y >= H))[0]
        if len(bad):
            i = int(bad[0])
            raise AnnotationError(
                f"dot {i} at (x={x[i]:.3f}, y={y[i]:.3f}) lies outside image "
                f"bounds [0, {W}) x [0, {H})"
            )


@dataclass
class ImageSample:
    image: np.ndarray
    dots: DotAnnotation
    source_id: str
    split: str = "train"
    parent_id: str | None = None

    def __post_init__(self):
        if self.image.ndim == 2:
            self.image = self.image[:, :, None]
        if self.image.ndim != 3:
            raise ShapeError(f"image must be H x W x C, got shape {self.image.shape}")
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")

    @property
    def count(self):
        return self.dots.count()

    @property
    def shape(self):
        return self.image.shape[:2]

    @property
    def group_id(self):
        """Id of the original image this sample was cut from."""
        return self.parent_id or self.source_id


@dataclass(frozen=True)
class DensityMap:
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.values.ndim != 2:
            raise ShapeError(f"density map must be 2-D, got shape {self.values.shape}")

    @cached_property
    def total(self):
        return float(self.values.sum(dtype=np.float64))

    @property
    def shape(self):
        return self.values.shape
