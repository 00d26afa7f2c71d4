"""Independent brute-force reference implementations used by the tests.

These are deliberately naive (scalar Python loops, no shared helpers with the
package) so that agreement is meaningful.
"""
import math

import numpy as np


def ssim_global_scalar(x, y, dynamic_range=8.0):
    """1 - SSIM with one set of statistics over every entry of x and y."""
    xs = [float(v) for v in np.asarray(x).ravel()]
    ys = [float(v) for v in np.asarray(y).ravel()]
    n = len(xs)
    mx = math.fsum(xs) / n
    my = math.fsum(ys) / n
    vx = math.fsum((a - mx) ** 2 for a in xs) / n
    vy = math.fsum((b - my) ** 2 for b in ys) / n
    cov = math.fsum((a - mx) * (b - my) for a, b in zip(xs, ys)) / n
    c1 = (0.01 * dynamic_range) ** 2
    c2 = (0.03 * dynamic_range) ** 2
    s = (2 * mx * my + c1) * (2 * cov + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    return 1.0 - s


def inv2(m):
    a, b, c, d = m[0][0], m[0][1], m[1][0], m[1][1]
    det = a * d - b * c
    return [[d / det, -b / det], [-c / det, a / det]]


def matmul2(a, b):
    return [[a[i][0] * b[0][j] + a[i][1] * b[1][j] for j in range(2)] for i in range(2)]


def affine_flow_pixel(z, p_src, j_src, p_drv, j_drv):
    m = matmul2(j_src, inv2(j_drv))
    dz = (z[0] - p_drv[0], z[1] - p_drv[1])
    return (p_src[0] + m[0][0] * dz[0] + m[0][1] * dz[1],
            p_src[1] + m[1][0] * dz[0] + m[1][1] * dz[1])


def local_affine_flow_loops(p_src, j_src, p_drv, j_drv, h, w):
    """(N+1, H, W, 2): per-keypoint affine candidates then the identity (background)."""
    n = len(p_src)
    out = np.zeros((n + 1, h, w, 2))
    for yi in range(h):
        y = -1.0 + 2.0 * yi / (h - 1)
        for xi in range(w):
            x = -1.0 + 2.0 * xi / (w - 1)
            for k in range(n):
                out[k, yi, xi] = affine_flow_pixel((x, y), p_src[k], j_src[k], p_drv[k], j_drv[k])
            out[n, yi, xi] = (x, y)
    return out


def combine_loops(candidates, masks):
    k, h, w, _ = candidates.shape
    out = np.zeros((h, w, 2))
    for yi in range(h):
        for xi in range(w):
            for c in range(2):
                out[yi, xi, c] = math.fsum(masks[i, yi, xi] * candidates[i, yi, xi, c] for i in range(k))
    return out


def per_channel_l1(feats_a, feats_b):
    """Sum over layers and channels of mean |a - b| (lists of (B, C, H, W) arrays)."""
    total = 0.0
    for fa, fb in zip(feats_a, feats_b):
        for c in range(fa.shape[1]):
            total += float(np.mean(np.abs(fa[:, c] - fb[:, c])))
    return total


def gaussian_kernel2d(size=11, sigma=1.5):
    k = np.zeros((size, size))
    half = (size - 1) / 2
    for i in range(size):
        for j in range(size):
            k[i, j] = math.exp(-((i - half) ** 2 + (j - half) ** 2) / (2 * sigma * sigma))
    return k / k.sum()


def windowed_ssim_loops(x, y, data_range=1.0, size=11, sigma=1.5):
    """Mean SSIM over every fully-contained window of two 2-D arrays."""
    k = gaussian_kernel2d(size, sigma)
    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    h, w = x.shape
    vals = []
    for i in range(h - size + 1):
        for j in range(w - size + 1):
            px = x[i:i + size, j:j + size]
            py = y[i:i + size, j:j + size]
            mx, my = (k * px).sum(), (k * py).sum()
            vx = (k * (px - mx) ** 2).sum()
            vy = (k * (py - my) ** 2).sum()
            cov = (k * (px - mx) * (py - my)).sum()
            vals.append((2 * mx * my + c1) * (2 * cov + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2)))
    return float(np.mean(vals))


def mean_abs_loops(a, b):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    return math.fsum(abs(p - q) for p, q in zip(a, b)) / len(a)


def conv_output_length(length, kernel, strides):
    for s in strides:
        length = (length - kernel) // s + 1
    return length


def receptive_field(kernel, strides):
    """Walk back from one output unit: r_{l-1} = (r_l - 1) * s_l + k."""
    r = 1
    for s in reversed(strides):
        r = (r - 1) * s + kernel
    return r


def central_difference(fn, x, h):
    """Numerical gradient of a scalar function of a float64 numpy array."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + h
        fp = fn(x)
        x[idx] = orig - h
        fm = fn(x)
        x[idx] = orig
        grad[idx] = (fp - fm) / (2 * h)
    return grad
