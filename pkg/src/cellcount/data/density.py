import numpy as np

from cellcount import kernels
from cellcount.data.types import DensityMap, DotAnnotation

DEFAULT_SIGMA = 3.0
TRUNCATE = 4.0


def rasterize_density(dots, shape, sigma=DEFAULT_SIGMA):
    """Ground-truth density: one unit-mass Gaussian per dot.

    Each kernel is clipped to the image and renormalized, so the map total
    equals the dot count regardless of where dots sit.
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if not isinstance(dots, DotAnnotation):
        dots = DotAnnotation(dots)
    H, W = shape[:2]
    dots.check_bounds((H, W))
    out = np.zeros((H, W), dtype=np.float64)
    kernels.splat_gaussians(out, dots.points[:, 0], dots.points[:, 1], sigma, TRUNCATE)
    return DensityMap(out)


def peak_value(sigma=DEFAULT_SIGMA):
    """Height of an unclipped unit-mass Gaussian of width ``sigma``."""
    return 1.0 / (2.0 * np.pi * sigma * sigma)
