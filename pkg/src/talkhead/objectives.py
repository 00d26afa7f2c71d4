"""Training objectives for the motion field generator and the perceptual reconstruction loss."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn

DEFAULT_SCALES = (1.0, 0.5, 0.25, 0.125)
MIN_PYRAMID_SIDE = 4


@dataclass
class LossWeights:
    lambda_m: float = 1.0
    lambda_p: float = 10.0
    lambda_j: float = 10.0
    lambda_p_prime: float = 100.0
    lambda_rec: float = 10.0
    lambda_eq_p: float = 10.0
    lambda_eq_j: float = 10.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value < 0:
                raise ValueError(f"{name} must be >= 0, got {value}")

    def to_dict(self):
        return asdict(self)


def lambda_m_schedule(step: int, decay_steps: int, initial: float = 1.0) -> float:
    """Linear decay from ``initial`` to 0 over ``decay_steps``, then pinned at exactly 0."""
    if decay_steps <= 0 or step >= decay_steps:
        return 0.0
    return initial * (1.0 - step / decay_steps)


def _check_same(name, a, b):
    if a.shape != b.shape:
        raise ValueError(f"{name}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def stage1_loss(pred: dict, target: dict, w: LossWeights, lambda_m: float | None = None) -> dict:
    """Keypoint distillation against detector outputs.

    ``pred``/``target`` hold ``heatmap`` (..., N, H, W), ``value`` (..., N, 2) and
    ``jacobian`` (..., N, 2, 2). Every frame has the same element count, so the
    per-frame L1 averaged over T equals one global mean. Returns the weighted
    terms and their sum under ``total``.
    """
    lam_m = w.lambda_m if lambda_m is None else lambda_m
    for key in ("heatmap", "value", "jacobian"):
        _check_same(key, pred[key], target[key])
    heat = (pred["heatmap"] - target["heatmap"]).abs().mean()
    pos = (pred["value"] - target["value"]).abs().mean()
    jac = (pred["jacobian"] - target["jacobian"]).abs().mean()
    terms = {"heatmap": lam_m * heat, "position": w.lambda_p * pos, "jacobian": w.lambda_j * jac}
    terms["total"] = terms["heatmap"] + terms["position"] + terms["jacobian"]
    return terms


class PerceptualExtractor(nn.Module):
    """Frozen conv feature stack with five tapped layers.

    Default weights are seeded random (Kaiming normal). ``from_vgg16`` swaps in
    torchvision's VGG-16 layout given a local weights file.
    """

    def __init__(self, seed: int = 0, widths=(16, 32, 64, 64, 64), in_channels=3):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        blocks = []
        prev = in_channels
        for i, width in enumerate(widths):
            conv = nn.Conv2d(prev, width, 3, padding=1)
            with torch.no_grad():
                std = (2.0 / (prev * 9)) ** 0.5
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * std)
                conv.bias.zero_()
            pool = [nn.AvgPool2d(2, ceil_mode=True)] if i > 0 else []
            blocks.append(nn.Sequential(*pool, conv, nn.ReLU()))
            prev = width
        self.blocks = nn.ModuleList(blocks)
        self.register_buffer("mean", torch.full((1, in_channels, 1, 1), 0.5))
        self.register_buffer("std", torch.full((1, in_channels, 1, 1), 0.25))
        self.source = f"random(seed={seed})"
        self.freeze()

    def freeze(self):
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        return self

    def train(self, mode: bool = True):
        # always frozen: BN-free, but keep eval semantics regardless of parent mode
        return super().train(False)

    @classmethod
    def from_vgg16(cls, weights_path):
        from torchvision.models import vgg16

        net = vgg16()
        net.load_state_dict(torch.load(weights_path, map_location="cpu"))
        feats = net.features
        ext = cls.__new__(cls)
        nn.Module.__init__(ext)
        # relu1_2, relu2_2, relu3_3, relu4_3, relu5_3
        cuts = [(0, 4), (4, 9), (9, 16), (16, 23), (23, 30)]
        ext.blocks = nn.ModuleList(nn.Sequential(*feats[a:b]) for a, b in cuts)
        ext.register_buffer("mean", torch.tensor([0.485, 0.456, 0.406]).reshape(1, 3, 1, 1))
        ext.register_buffer("std", torch.tensor([0.229, 0.224, 0.225]).reshape(1, 3, 1, 1))
        ext.source = f"vgg16({weights_path})"
        return ext.freeze()

    def forward(self, x):
        x = (x - self.mean.to(x)) / self.std.to(x)
        feats = []
        for block in self.blocks:
            x = block(x)
            feats.append(x)
        return feats


def perceptual_loss(gen, gt, ext: PerceptualExtractor):
    """Sum over tapped layers and channels of the mean absolute feature difference."""
    _check_same("perceptual_loss", gen, gt)
    total = gen.new_zeros(())
    for fa, fb in zip(ext(gen), ext(gt)):
        total = total + (fa - fb).abs().mean(dim=(0, 2, 3)).sum()
    return total


def downsample(image, scale: float):
    if not 0 < scale <= 1:
        raise ValueError(f"pyramid scale must lie in (0, 1], got {scale}")
    if scale == 1:
        return image
    h, w = image.shape[-2:]
    size = (int(round(h * scale)), int(round(w * scale)))
    if min(size) < MIN_PYRAMID_SIDE:
        raise ValueError(f"scale {scale} shrinks a {h}x{w} image below {MIN_PYRAMID_SIDE} px")
    return F.interpolate(image, size=size, mode="area")


def pyramid_perceptual_loss(gen, gt, ext: PerceptualExtractor, scales=DEFAULT_SCALES):
    if not scales:
        raise ValueError("at least one pyramid scale is required")
    _check_same("pyramid_perceptual_loss", gen, gt)
    h, w = gen.shape[-2:]
    for s in scales:
        if not 0 < s <= 1:
            raise ValueError(f"pyramid scale must lie in (0, 1], got {s}")
        if min(round(h * s), round(w * s)) < MIN_PYRAMID_SIDE:
            raise ValueError(f"scale {s} shrinks a {h}x{w} image below {MIN_PYRAMID_SIDE} px")
    return sum(perceptual_loss(downsample(gen, s), downsample(gt, s), ext) for s in scales)


def stage2_loss(pred_kp, target_kp, gen_frames, gt_frames, eq_terms, w: LossWeights,
                ext: PerceptualExtractor | None = None, scales=DEFAULT_SCALES) -> dict:
    """Fine-tuning objective: position distillation + pyramid perceptual + equivariance.

    ``eq_terms`` is the ``(L_eq^P, L_eq^J)`` pair; ``ext`` may be None only when
    no frames are given (``gen_frames is None``), in which case rec = 0.
    """
    _check_same("value", pred_kp, target_kp)
    pos = (pred_kp - target_kp).abs().mean()
    if gen_frames is None:
        rec = pos.new_zeros(())
    else:
        if ext is None:
            raise ValueError("a perceptual extractor is required when frames are given")
        rec = pyramid_perceptual_loss(gen_frames, gt_frames, ext, scales)
    eq_p, eq_j = eq_terms
    terms = {"position": w.lambda_p_prime * pos, "reconstruction": w.lambda_rec * rec,
             "equivariance_p": w.lambda_eq_p * eq_p, "equivariance_j": w.lambda_eq_j * eq_j}
    terms["total"] = sum(terms.values())
    return terms
