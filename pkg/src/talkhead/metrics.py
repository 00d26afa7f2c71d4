"""Evaluation metrics: PSNR, windowed image SSIM, Frechet distance, pose/keypoint L1, PCA trajectory plots."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import linalg
from scipy.ndimage import correlate1d

PSNR_CAP = 99.0
FID_EPS = 1e-6


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def _luma(img):
    if img.ndim == 3 and img.shape[-1] == 3:
        return img @ np.array([0.299, 0.587, 0.114])
    if img.ndim == 2:
        return img
    raise ValueError(f"expected (H, W) or (H, W, 3) image, got {img.shape}")


def gaussian_window(size=11, sigma=1.5):
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def image_ssim(a, b, data_range=1.0, win_size=11, sigma=1.5) -> float:
    """Mean SSIM over valid 11x11 Gaussian windows of the luma channel."""
    a, b = _check_pair(a, b)
    x, y = _luma(a), _luma(b)
    if min(x.shape) < win_size:
        raise ValueError(f"image side {min(x.shape)} is smaller than the {win_size}px window")
    g = gaussian_window(win_size, sigma)
    half = win_size // 2

    def filt(img):
        out = correlate1d(correlate1d(img, g, axis=0, mode="constant"), g, axis=1, mode="constant")
        return out[half:-half, half:-half]

    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    mx, my = filt(x), filt(y)
    sxx = filt(x * x) - mx * mx
    syy = filt(y * y) - my * my
    sxy = filt(x * y) - mx * my
    ssim = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx**2 + my**2 + c1) * (sxx + syy + c2))
    return float(ssim.mean())


def frechet_distance(feats_a, feats_b, eps=FID_EPS) -> float:
    feats_a = np.asarray(feats_a, dtype=np.float64)
    feats_b = np.asarray(feats_b, dtype=np.float64)
    if len(feats_a) < 2 or len(feats_b) < 2:
        raise ValueError("need at least 2 samples per set")
    mu_a, mu_b = feats_a.mean(0), feats_b.mean(0)
    cov_a = np.atleast_2d(np.cov(feats_a, rowvar=False))
    cov_b = np.atleast_2d(np.cov(feats_b, rowvar=False))
    return gaussian_frechet(mu_a, cov_a, mu_b, cov_b, eps)


def gaussian_frechet(mu_a, cov_a, mu_b, cov_b, eps=FID_EPS) -> float:
    # regularize both covariances consistently so identical sets give exactly ~0
    offset = np.eye(len(mu_a)) * eps
    cov_a, cov_b = cov_a + offset, cov_b + offset
    covmean = np.real(linalg.sqrtm(cov_a @ cov_b))
    diff = mu_a - mu_b
    return float(max(diff @ diff + np.trace(cov_a + cov_b - 2 * covmean), 0.0))


class RandomConvEmbedder:
    """Seeded-random frozen conv net mapping (N, H, W, 3) images to feature vectors."""

    def __init__(self, seed=0, widths=(16, 32, 64)):
        import torch
        from torch import nn

        self.torch = torch
        gen = torch.Generator().manual_seed(seed)
        layers, prev = [], 3
        for width in widths:
            conv = nn.Conv2d(prev, width, 3, stride=2, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * (2.0 / (prev * 9)) ** 0.5)
                conv.bias.zero_()
            layers += [conv, nn.ReLU()]
            prev = width
        self.net = nn.Sequential(*layers, nn.AdaptiveAvgPool2d(1), nn.Flatten()).eval()
        self.name = f"random-conv(seed={seed})"

    def __call__(self, images):
        x = self.torch.as_tensor(np.asarray(images, dtype=np.float32)).permute(0, 3, 1, 2)
        with self.torch.no_grad():
            return self.net(x).double().numpy()


def fid(set_a, set_b, embedder=None) -> float:
    embedder = embedder or RandomConvEmbedder()
    return frechet_distance(embedder(set_a), embedder(set_b))


def pose_errors(pred, gt) -> float:
    """Mean absolute difference over all entries (HE for poses, KE for keypoints)."""
    a, b = _check_pair(pred, gt)
    return float(np.mean(np.abs(a - b)))


def pca_project(seqs, gt):
    """Project each (T, 6) sequence onto the first principal axis of ``gt``."""
    gt = np.asarray(gt, dtype=np.float64)
    mean = gt.mean(0)
    centered = gt - mean
    if np.allclose(centered, 0):
        raise ValueError("ground-truth sequence has zero variance; PCA axis undefined")
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    axis = vt[0]
    # fix the sign so the largest-magnitude loading is positive
    axis = axis * np.sign(axis[np.argmax(np.abs(axis))])
    return [(np.asarray(s_, dtype=np.float64) - mean) @ axis for s_ in seqs], axis


def pca_trajectory_plot(seqs, labels, out_path, gt_index=0):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if not seqs:
        raise ValueError("need at least one sequence")
    if len(labels) != len(seqs):
        raise ValueError("one label per sequence")
    projected, _ = pca_project(seqs, seqs[gt_index])
    fig, ax = plt.subplots(figsize=(8, 3))
    for proj, label in zip(projected, labels):
        ax.plot(np.arange(len(proj)), proj, label=label)
    ax.set_xlabel("frame")
    ax.set_ylabel("head motion (1st PC)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=100)
    plt.close(fig)
    return projected


@dataclass
class EvalReport:
    psnr: float
    ssim: float
    fid: float | None = None
    fid_embedder: str | None = None
    he: float | None = None
    ke: float | None = None
    per_frame: list = field(default_factory=list)

    def to_json(self, path):
        with open(path, "w") as f:
            json.dump(asdict(self), f, indent=2)

    def to_csv(self, path):
        with open(path, "w") as f:
            f.write("frame,psnr,ssim\n")
            for row in self.per_frame:
                f.write(f"{row['frame']},{row['psnr']!r},{row['ssim']!r}\n")


def evaluate_frames(gen, gt, embedder=None, with_fid=True) -> EvalReport:
    gen, gt = np.asarray(gen), np.asarray(gt)
    if gen.shape != gt.shape:
        raise ValueError(f"frame sets differ: {gen.shape} vs {gt.shape}")
    rows = [{"frame": i, "psnr": psnr(a, b), "ssim": image_ssim(a, b)} for i, (a, b) in enumerate(zip(gen, gt))]
    report = EvalReport(psnr=float(np.mean([r["psnr"] for r in rows])),
                        ssim=float(np.mean([r["ssim"] for r in rows])), per_frame=rows)
    if with_fid and len(gen) >= 2:
        embedder = embedder or RandomConvEmbedder()
        report.fid = fid(gen, gt, embedder)
        report.fid_embedder = getattr(embedder, "name", type(embedder).__name__)
    return report
