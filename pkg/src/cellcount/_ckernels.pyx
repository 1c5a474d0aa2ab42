# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops. Semantics mirror ``_pykernels`` exactly."""

import numpy as np

from libc.math cimport exp, ceil, floor, sqrt, fabs


def splat_gaussians(double[:, ::1] out, double[::1] xs, double[::1] ys,
                    double sigma, double truncate, bint renormalize):
    cdef Py_ssize_t H = out.shape[0], W = out.shape[1]
    cdef Py_ssize_t n = xs.shape[0], k, i, j, i0, i1, j0, j1
    cdef double x, y, radius = truncate * sigma, inv = 1.0 / (2.0 * sigma * sigma)
    cdef double sx, sy, norm
    cdef double[::1] gx = np.empty(W, dtype=np.float64)
    cdef double[::1] gy = np.empty(H, dtype=np.float64)
    for k in range(n):
        x = xs[k]
        y = ys[k]
        j0 = <Py_ssize_t>max(0.0, ceil(x - radius))
        j1 = <Py_ssize_t>min(<double>(W - 1), floor(x + radius))
        i0 = <Py_ssize_t>max(0.0, ceil(y - radius))
        i1 = <Py_ssize_t>min(<double>(H - 1), floor(y + radius))
        if j1 < j0 or i1 < i0:
            continue
        sx = 0.0
        for j in range(j0, j1 + 1):
            gx[j] = exp(-(j - x) * (j - x) * inv)
            sx += gx[j]
        sy = 0.0
        for i in range(i0, i1 + 1):
            gy[i] = exp(-(i - y) * (i - y) * inv)
            sy += gy[i]
        if renormalize:
            norm = 1.0 / (sx * sy)
        else:
            norm = inv / 3.141592653589793
        for i in range(i0, i1 + 1):
            for j in range(j0, j1 + 1):
                out[i, j] += gy[i] * gx[j] * norm


def render_soft_disks(double[:, ::1] out, double[::1] xs, double[::1] ys,
                      double[::1] radii, double[::1] softness, double[::1] amps):
    cdef Py_ssize_t H = out.shape[0], W = out.shape[1]
    cdef Py_ssize_t n = xs.shape[0], k, i, j, i0, i1, j0, j1
    cdef double x, y, r, b, a, reach, d
    for k in range(n):
        x = xs[k]
        y = ys[k]
        r = radii[k]
        b = softness[k]
        a = amps[k]
        reach = r + 6.0 * b + 1.0
        j0 = <Py_ssize_t>max(0.0, ceil(x - reach))
        j1 = <Py_ssize_t>min(<double>(W - 1), floor(x + reach))
        i0 = <Py_ssize_t>max(0.0, ceil(y - reach))
        i1 = <Py_ssize_t>min(<double>(H - 1), floor(y + reach))
        for i in range(i0, i1 + 1):
            for j in range(j0, j1 + 1):
                d = sqrt((j - x) * (j - x) + (i - y) * (i - y))
                out[i, j] += a / (1.0 + exp((d - r) / b))


def local_max_mask(double[:, ::1] m, Py_ssize_t radius, double threshold):
    cdef Py_ssize_t H = m.shape[0], W = m.shape[1], i, j, a, b
    cdef double v
    cdef bint is_max
    mask = np.zeros((H, W), dtype=np.uint8)
    cdef unsigned char[:, ::1] mk = mask
    for i in range(H):
        for j in range(W):
            v = m[i, j]
            if not v > threshold:
                continue
            is_max = True
            for a in range(max(0, i - radius), min(H, i + radius + 1)):
                for b in range(max(0, j - radius), min(W, j + radius + 1)):
                    if m[a, b] > v:
                        is_max = False
                        break
                if not is_max:
                    break
            if is_max:
                mk[i, j] = 1
    return mask


def greedy_nms(Py_ssize_t[::1] rows, Py_ssize_t[::1] cols, Py_ssize_t radius):
    """Keep candidates in the given (descending-score) order unless an already
    kept one lies within ``radius`` in Chebyshev distance."""
    cdef Py_ssize_t n = rows.shape[0], k, q, nkeep = 0
    keep = np.zeros(n, dtype=np.intp)
    cdef Py_ssize_t[::1] kp = keep
    cdef bint ok
    for k in range(n):
        ok = True
        for q in range(nkeep):
            if (abs(rows[k] - rows[kp[q]]) <= radius and
                    abs(cols[k] - cols[kp[q]]) <= radius):
                ok = False
                break
        if ok:
            kp[nkeep] = k
            nkeep += 1
    return keep[:nkeep]


def bilinear_gather(double[:, :, ::1] x, double[:, :, :, ::1] s):
    cdef Py_ssize_t H = x.shape[0], W = x.shape[1], C = x.shape[2]
    cdef Py_ssize_t K = s.shape[2], i, j, k, c, x0, y0, x1, y1
    cdef double sx, sy, fx, fy, w00, w01, w10, w11
    out = np.empty((H, W, K, C), dtype=np.float64)
    cdef double[:, :, :, ::1] o = out
    for i in range(H):
        for j in range(W):
            for k in range(K):
                sx = s[i, j, k, 0]
                sy = s[i, j, k, 1]
                x0 = <Py_ssize_t>floor(sx)
                y0 = <Py_ssize_t>floor(sy)
                x1 = min(x0 + 1, W - 1)
                y1 = min(y0 + 1, H - 1)
                fx = sx - x0
                fy = sy - y0
                w00 = (1.0 - fy) * (1.0 - fx)
                w01 = (1.0 - fy) * fx
                w10 = fy * (1.0 - fx)
                w11 = fy * fx
                for c in range(C):
                    o[i, j, k, c] = (w00 * x[y0, x0, c] + w01 * x[y0, x1, c]
                                     + w10 * x[y1, x0, c] + w11 * x[y1, x1, c])
    return out
