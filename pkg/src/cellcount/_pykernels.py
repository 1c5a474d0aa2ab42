"""Pure numpy implementations of the hot loops in ``_ckernels``.

Used when the compiled extension is unavailable or disabled; the two backends
share signatures and in-place conventions.
"""

import numpy as np
from scipy import ndimage


def splat_gaussians(out, xs, ys, sigma, truncate, renormalize):
    H, W = out.shape
    radius = truncate * sigma
    inv = 1.0 / (2.0 * sigma * sigma)
    for x, y in zip(xs, ys):
        j0 = int(max(0.0, np.ceil(x - radius)))
        j1 = int(min(W - 1.0, np.floor(x + radius)))
        i0 = int(max(0.0, np.ceil(y - radius)))
        i1 = int(min(H - 1.0, np.floor(y + radius)))
        if j1 < j0 or i1 < i0:
            continue
        jj = np.arange(j0, j1 + 1, dtype=np.float64)
        ii = np.arange(i0, i1 + 1, dtype=np.float64)
        gx = np.exp(-(jj - x) ** 2 * inv)
        gy = np.exp(-(ii - y) ** 2 * inv)
        norm = 1.0 / (gx.sum() * gy.sum()) if renormalize else inv / np.pi
        out[i0:i1 + 1, j0:j1 + 1] += np.outer(gy, gx) * norm


def render_soft_disks(out, xs, ys, radii, softness, amps):
    H, W = out.shape
    for x, y, r, b, a in zip(xs, ys, radii, softness, amps):
        reach = r + 6.0 * b + 1.0
        j0 = int(max(0.0, np.ceil(x - reach)))
        j1 = int(min(W - 1.0, np.floor(x + reach)))
        i0 = int(max(0.0, np.ceil(y - reach)))
        i1 = int(min(H - 1.0, np.floor(y + reach)))
        if j1 < j0 or i1 < i0:
            continue
        jj = np.arange(j0, j1 + 1, dtype=np.float64)
        ii = np.arange(i0, i1 + 1, dtype=np.float64)
        d = np.sqrt((jj[None, :] - x) ** 2 + (ii[:, None] - y) ** 2)
        out[i0:i1 + 1, j0:j1 + 1] += a / (1.0 + np.exp((d - r) / b))


def local_max_mask(m, radius, threshold):
    # 'nearest' padding only repeats in-bounds values, so the filtered max
    # equals the max over the clipped window.
    peak = ndimage.maximum_filter(m, size=2 * radius + 1, mode="nearest")
    return ((m >= peak) & (m > threshold)).astype(np.uint8)


def greedy_nms(rows, cols, radius):
    kept = []
    for k in range(len(rows)):
        if all(abs(rows[k] - rows[q]) > radius or abs(cols[k] - cols[q]) > radius
               for q in kept):
            kept.append(k)
    return np.asarray(kept, dtype=np.intp)


def bilinear_gather(x, s):
    H, W, _ = x.shape
    sx = s[..., 0]
    sy = s[..., 1]
    x0 = np.floor(sx).astype(np.intp)
    y0 = np.floor(sy).astype(np.intp)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    fx = (sx - x0)[..., None]
    fy = (sy - y0)[..., None]
    return ((1 - fy) * (1 - fx) * x[y0, x0] + (1 - fy) * fx * x[y0, x1]
            + fy * (1 - fx) * x[y1, x0] + fy * fx * x[y1, x1])
