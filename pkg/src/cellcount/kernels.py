"""Backend selection for the numeric hot loops.

The compiled Cython extension is used when it was built; otherwise, or when
``CELLCOUNT_PURE_PYTHON`` is set to a non-empty value, the numpy fallback is
used. ``BACKEND`` names the active one.
"""

import os

import numpy as np

from cellcount import _pykernels

try:
    if os.environ.get("CELLCOUNT_PURE_PYTHON"):
        raise ImportError("compiled kernels disabled by CELLCOUNT_PURE_PYTHON")
    from cellcount import _ckernels as _impl
    BACKEND = "cython"
except ImportError:
    _impl = _pykernels
    BACKEND = "python"


def available_backends():
    """Map backend name to module for every backend importable here."""
    backends = {"python": _pykernels}
    try:
        from cellcount import _ckernels
    except ImportError:
        pass
    else:
        backends["cython"] = _ckernels
    return backends


def _f64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def splat_gaussians(out, xs, ys, sigma, truncate=4.0, renormalize=True, impl=None):
    """Accumulate one Gaussian per (x, y) into ``out`` in place.

    The kernel is evaluated at integer pixel centres within ``truncate * sigma``
    of the dot. With ``renormalize`` each clipped window is scaled to unit mass.
    """
    (impl or _impl).splat_gaussians(out, _f64(xs), _f64(ys), float(sigma),
                                    float(truncate), bool(renormalize))
    return out


def render_soft_disks(out, xs, ys, radii, softness, amps, impl=None):
    (impl or _impl).render_soft_disks(out, _f64(xs), _f64(ys), _f64(radii),
                                      _f64(softness), _f64(amps))
    return out


def peak_local_max(m, min_distance, threshold, impl=None):
    """Return an (N, 2) array of (row, col) peaks, strongest first."""
    impl = impl or _impl
    m = _f64(m)
    mask = impl.local_max_mask(m, int(min_distance), float(threshold))
    rows, cols = np.nonzero(mask)
    order = np.lexsort((cols, rows, -m[rows, cols]))
    rows = np.ascontiguousarray(rows[order], dtype=np.intp)
    cols = np.ascontiguousarray(cols[order], dtype=np.intp)
    keep = impl.greedy_nms(rows, cols, int(min_distance))
    return np.stack([rows[keep], cols[keep]], axis=1)


def bilinear_gather(x, s, impl=None):
    """Bilinear read of an (H, W, C) grid at (H, W, K, 2) positions (x, y).

    Positions must already lie in [0, W-1] x [0, H-1].
    """
    return (impl or _impl).bilinear_gather(_f64(x), _f64(s))
