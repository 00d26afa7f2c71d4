"""Pure numpy / Python versions of the compiled kernels (same contracts)."""
import math

import numpy as np


def pitch_track(windows, sr, fmin, fmax, threshold):
    w = np.ascontiguousarray(windows, dtype=np.float64)
    if w.ndim == 1:
        w = w[None, :]
    m, n = w.shape
    lag_min = max(int(math.ceil(sr / fmax)), 1)
    lag_max = min(int(math.floor(sr / fmin)), n - 2)
    if lag_max <= lag_min:
        raise ValueError("window too short for the pitch search range")

    x = w - w.mean(axis=1, keepdims=True)
    r0 = np.einsum("ij,ij->i", x, x)
    nfft = 1 << int(math.ceil(math.log2(2 * n)))
    spec = np.fft.rfft(x, nfft, axis=1)
    acf = np.fft.irfft(spec * np.conj(spec), nfft, axis=1)[:, : lag_max + 2]

    pitch = np.zeros(m)
    voiced = np.zeros(m)
    for k in range(m):
        if r0[k] < 1e-10:
            continue
        r = acf[k] / r0[k]
        best = lag_min + int(np.argmax(r[lag_min : lag_max + 1]))
        if r[best] < threshold:
            continue
        delta = 0.0
        if lag_min < best < lag_max:
            a, b, c = r[best - 1], r[best], r[best + 1]
            denom = a - 2.0 * b + c
            if denom < 0.0:
                delta = 0.5 * (a - c) / denom
        pitch[k] = sr / (best + delta)
        voiced[k] = 1.0
    return pitch, voiced


def draw_segments(canvas, segments):
    h, w = canvas.shape
    for x0, y0, x1, y1 in np.asarray(segments, dtype=np.int64).reshape(-1, 4).tolist():
        if y1 < y0 or (y1 == y0 and x1 < x0):
            x0, y0, x1, y1 = x1, y1, x0, y0
        dx = abs(x1 - x0)
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
