"""Building blocks shared by the networks: hourglass (2D / 3D), residual blocks, ResNet encoder."""
from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

_CONV = {2: nn.Conv2d, 3: nn.Conv3d}
_NORM = {2: nn.BatchNorm2d, 3: nn.BatchNorm3d}
_POOL = {2: nn.AvgPool2d, 3: nn.AvgPool3d}


class DownBlock(nn.Module):
    """conv k3 -> BN -> ReLU -> 2x average pool (over every spatial/temporal axis)."""

    def __init__(self, dim, in_features, out_features):
        super().__init__()
        self.conv = _CONV[dim](in_features, out_features, kernel_size=3, padding=1)
        self.norm = _NORM[dim](out_features, affine=True)
        self.pool = _POOL[dim](kernel_size=2)

    def forward(self, x):
        return self.pool(F.relu(self.norm(self.conv(x))))


class UpBlock(nn.Module):
    """2x nearest upsampling -> conv k3 -> BN -> ReLU."""

    def __init__(self, dim, in_features, out_features):
        super().__init__()
        self.conv = _CONV[dim](in_features, out_features, kernel_size=3, padding=1)
        self.norm = _NORM[dim](out_features, affine=True)

    def forward(self, x):
        return F.relu(self.norm(self.conv(F.interpolate(x, scale_factor=2))))


class SameBlock2d(nn.Module):
    def __init__(self, in_features, out_features, kernel_size=3, padding=1):
        super().__init__()
        self.conv = nn.Conv2d(in_features, out_features, kernel_size=kernel_size, padding=padding)
        self.norm = nn.BatchNorm2d(out_features, affine=True)

    def forward(self, x):
        return F.relu(self.norm(self.conv(x)))


class ResBlock2d(nn.Module):
    """Pre-activation residual block that keeps resolution and channel count."""

    def __init__(self, in_features, kernel_size=3, padding=1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_features, in_features, kernel_size=kernel_size, padding=padding)
        self.conv2 = nn.Conv2d(in_features, in_features, kernel_size=kernel_size, padding=padding)
        self.norm1 = nn.BatchNorm2d(in_features, affine=True)
        self.norm2 = nn.BatchNorm2d(in_features, affine=True)

    def forward(self, x):
        out = self.conv1(F.relu(self.norm1(x)))
        out = self.conv2(F.relu(self.norm2(out)))
        return out + x


class Hourglass(nn.Module):
    """U-Net style encoder/decoder; the output concatenates the input channels.

    ``dim=3`` treats the input as (B, C, T, H, W) and downsamples time and space
    together, so T and H, W must be divisible by ``2 ** num_blocks``.
    """

    def __init__(self, dim, block_expansion, in_features, num_blocks=3, max_features=256):
        super().__init__()
        self.dim = dim
        self.num_blocks = num_blocks
        width = [min(max_features, block_expansion * 2**i) for i in range(num_blocks + 1)]
        self.down_blocks = nn.ModuleList(
            DownBlock(dim, in_features if i == 0 else width[i], width[i + 1]) for i in range(num_blocks)
        )
        ups = []
        for i in reversed(range(num_blocks)):
            in_filters = (1 if i == num_blocks - 1 else 2) * width[i + 1]
            ups.append(UpBlock(dim, in_filters, width[i]))
        self.up_blocks = nn.ModuleList(ups)
        self.out_filters = block_expansion + in_features

    def forward(self, x):
        skips = [x]
        for down in self.down_blocks:
            skips.append(down(skips[-1]))
        out = skips.pop()
        for up in self.up_blocks:
            out = torch.cat([up(out), skips.pop()], dim=1)
        return out

    def temporal_intervals(self, length: int) -> np.ndarray:
        """For each output frame, the [lo, hi] input frames it can depend on.

        Walks the layer ladder (k3 convs, 2x pools, 2x nearest upsampling, skip
        concatenations) with interval arithmetic; BN is treated as per-frame
        (eval mode).
        """
        if self.dim != 3:
            raise ValueError("temporal intervals only apply to the 3D hourglass")

        def conv(iv):
            n = len(iv)
            lo = np.array([iv[max(i - 1, 0), 0] for i in range(n)])
            hi = np.array([iv[min(i + 1, n - 1), 1] for i in range(n)])
            lo = np.minimum(lo, iv[:, 0])
            hi = np.maximum(hi, iv[:, 1])
            return np.stack([lo, hi], axis=1)

        def pool(iv):
            n = len(iv) // 2
            return np.stack([np.minimum(iv[0:2 * n:2, 0], iv[1:2 * n:2, 0]),
                             np.maximum(iv[0:2 * n:2, 1], iv[1:2 * n:2, 1])], axis=1)

        def upsample(iv):
            return np.repeat(iv, 2, axis=0)

        def union(a, b):
            return np.stack([np.minimum(a[:, 0], b[:, 0]), np.maximum(a[:, 1], b[:, 1])], axis=1)

        skips = [np.stack([np.arange(length), np.arange(length)], axis=1)]
        for _ in range(self.num_blocks):
            skips.append(pool(conv(skips[-1])))
        out = skips.pop()
        for _ in range(self.num_blocks):
            out = union(conv(upsample(out)), skips.pop())
        return out


class BasicBlock(nn.Module):
    expansion = 1

    def __init__(self, in_planes, planes, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_planes, planes, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(planes)
        self.conv2 = nn.Conv2d(planes, planes, 3, stride=1, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(planes)
        self.shortcut = nn.Sequential()
        if stride != 1 or in_planes != planes:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_planes, planes, 1, stride=stride, bias=False), nn.BatchNorm2d(planes)
            )

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class ResNetEncoder(nn.Module):
    """ResNet-34 layout (3, 4, 6, 3 basic blocks) ending in global pooling + linear.

    ``stem_stride`` / ``stem_pool`` control the first conv; the audio encoder
    turns both off so a 4x41 input survives the four stages.
    """

    def __init__(self, in_channels, out_dim, width=64, layers=(3, 4, 6, 3), stem_stride=2, stem_pool=True):
        super().__init__()
        if stem_stride == 1:
            self.stem = nn.Conv2d(in_channels, width, 3, stride=1, padding=1, bias=False)
        else:
            self.stem = nn.Conv2d(in_channels, width, 7, stride=stem_stride, padding=3, bias=False)
        self.bn = nn.BatchNorm2d(width)
        self.pool = nn.MaxPool2d(3, stride=2, padding=1) if stem_pool else nn.Identity()
        blocks = []
        in_planes = width
        for stage, count in enumerate(layers):
            planes = width * 2**stage
            for b in range(count):
                blocks.append(BasicBlock(in_planes, planes, stride=2 if (b == 0 and stage > 0) else 1))
                in_planes = planes
        self.blocks = nn.Sequential(*blocks)
        self.fc = nn.Linear(in_planes, out_dim)

    def forward(self, x):
        x = self.pool(F.relu(self.bn(self.stem(x))))
        x = self.blocks(x)
        return self.fc(torch.flatten(F.adaptive_avg_pool2d(x, 1), 1))


def make_coordinate_grid(height, width, dtype=torch.float32, device=None) -> torch.Tensor:
    """(H, W, 2) grid of normalized (x, y) pixel-center coordinates spanning [-1, 1]."""
    x = torch.linspace(-1.0, 1.0, width, dtype=dtype, device=device) if width > 1 else torch.zeros(1, dtype=dtype)
    y = torch.linspace(-1.0, 1.0, height, dtype=dtype, device=device) if height > 1 else torch.zeros(1, dtype=dtype)
    yy, xx = torch.meshgrid(y, x, indexing="ij")
    return torch.stack([xx, yy], dim=-1)


def softmax_heatmap(logits: torch.Tensor, temperature: float = 0.1) -> torch.Tensor:
    """Spatial softmax over the last two axes."""
    shape = logits.shape
    flat = logits.reshape(*shape[:-2], -1)
    return F.softmax(flat / temperature, dim=-1).reshape(shape)


def soft_argmax(heatmap: torch.Tensor) -> torch.Tensor:
    """Expected (x, y) grid coordinate under a normalized (..., H, W) heatmap."""
    h, w = heatmap.shape[-2:]
    grid = make_coordinate_grid(h, w, dtype=heatmap.dtype, device=heatmap.device)
    return (heatmap.unsqueeze(-1) * grid).sum(dim=(-3, -2))
