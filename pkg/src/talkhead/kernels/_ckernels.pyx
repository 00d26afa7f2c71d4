# cython: language_level=3
"""Compiled hot loops: per-window autocorrelation pitch and wireframe rasterization."""
import numpy as np
cimport numpy as cnp
from libc.math cimport ceil, floor

cnp.import_array()


cdef void _pitch_one(const double[::1] w, double sr, Py_ssize_t lag_min, Py_ssize_t lag_max,
                     double threshold, double[::1] x, double[::1] r, double* pitch, double* voiced) noexcept nogil:
    cdef Py_ssize_t n = w.shape[0]
    cdef Py_ssize_t i, lag, best, m4
    cdef double mean = 0.0, r0 = 0.0, a0, a1, a2, a3, a, b, c, denom, delta
    cdef double* xp = &x[0]
    pitch[0] = 0.0
    voiced[0] = 0.0
    for i in range(n):
        mean += w[i]
    mean /= n
    for i in range(n):
        xp[i] = w[i] - mean
        r0 += xp[i] * xp[i]
    if r0 < 1e-10:
        return
    best = lag_min
    for lag in range(lag_min, lag_max + 1):
        # four partial sums so the compiler can keep the FMA pipes busy
        a0 = a1 = a2 = a3 = 0.0
        m4 = (n - lag) & ~3
        for i in range(0, m4, 4):
            a0 += xp[i] * xp[i + lag]
            a1 += xp[i + 1] * xp[i + 1 + lag]
            a2 += xp[i + 2] * xp[i + 2 + lag]
            a3 += xp[i + 3] * xp[i + 3 + lag]
        for i in range(m4, n - lag):
            a0 += xp[i] * xp[i + lag]
        r[lag] = (a0 + a1 + a2 + a3) / r0
        if r[lag] > r[best]:
            best = lag
    if r[best] < threshold:
        return
    delta = 0.0
    if best > lag_min and best < lag_max:
        a = r[best - 1]
        b = r[best]
        c = r[best + 1]
        denom = a - 2.0 * b + c
        if denom < 0.0:
            delta = 0.5 * (a - c) / denom
    pitch[0] = sr / (best + delta)
    voiced[0] = 1.0


def pitch_track(windows, double sr, double fmin, double fmax, double threshold):
    """Autocorrelation pitch for each row of ``windows``; returns (pitch_hz, voicing)."""
    cdef double[:, ::1] w = np.ascontiguousarray(windows, dtype=np.float64)
    cdef Py_ssize_t m = w.shape[0], n = w.shape[1], k
    cdef Py_ssize_t lag_min = <Py_ssize_t>ceil(sr / fmax)
    cdef Py_ssize_t lag_max = <Py_ssize_t>floor(sr / fmin)
    if lag_max > n - 2:
        lag_max = n - 2
    if lag_min < 1:
        lag_min = 1
    if lag_max <= lag_min:
        raise ValueError("window too short for the pitch search range")
    pitch = np.zeros(m, dtype=np.float64)
    voiced = np.zeros(m, dtype=np.float64)
    cdef double[::1] p = pitch
    cdef double[::1] v = voiced
    cdef double[::1] x = np.zeros(n, dtype=np.float64)
    cdef double[::1] r = np.zeros(lag_max + 2, dtype=np.float64)
    with nogil:
        for k in range(m):
            _pitch_one(w[k], sr, lag_min, lag_max, threshold, x, r, &p[k], &v[k])
    return pitch, voiced


def draw_segments(cnp.uint8_t[:, :] canvas, segments):
    """Bresenham-rasterize integer segments (x0, y0, x1, y1) into ``canvas`` in place.

    Each segment is walked from its endpoint with the smaller y (then smaller x),
    so mirrored geometry rasterizes to mirrored pixels.
    """
    cdef long[:, :] seg = np.ascontiguousarray(segments, dtype=np.int64).reshape(-1, 4)
    cdef Py_ssize_t h = canvas.shape[0], w = canvas.shape[1], s
    cdef long x0, y0, x1, y1, dx, dy, sx, sy, err, e2, t
    with nogil:
        for s in range(seg.shape[0]):
            x0 = seg[s, 0]; y0 = seg[s, 1]; x1 = seg[s, 2]; y1 = seg[s, 3]
            if y1 < y0 or (y1 == y0 and x1 < x0):
                t = x0; x0 = x1; x1 = t
                t = y0; y0 = y1; y1 = t
            dx = x1 - x0 if x1 >= x0 else x0 - x1
            dy = -(y1 - y0)
            sx = 1 if x0 < x1 else -1
            sy = 1 if y0 < y1 else -1
            err = dx + dy
            while True:
                if 0 <= x0 < w and 0 <= y0 < h:
                    canvas[y0, x0] = 1
                if x0 == x1 and y0 == y1:
                    break
                e2 = 2 * err
                if e2 >= dy:
                    err += dy
                    x0 += sx
                if e2 <= dx:
                    err += dx
                    y0 += sy
    return canvas
