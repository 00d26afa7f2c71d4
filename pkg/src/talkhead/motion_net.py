"""Motion field generator N_M: (reference image, pose boxes, audio) -> keypoint sequence.

Tensors are channel-first, time-second: V has shape (B, 6, T, 64, 64) with
channels ordered (image RGB, pose box, audio x2). :func:`to_whct` converts a
(C, T, H, W) slice to the [W, H, C, T] layout used in the design notes.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .audio import N_FEATURES, WINDOWS_PER_FRAME
from .fomm import NUM_KP, identity_jacobians
from .layers import Hourglass, soft_argmax, softmax_heatmap

GRID = 64
TIME_FACTOR = 8  # temporal downsampling of the 3-level hourglass


@dataclass
class MotionNetConfig:
    num_kp: int = NUM_KP
    grid: int = GRID
    block_expansion: int = 32
    max_features: int = 256
    num_blocks: int = 3
    head_kernel: int = 3
    temperature: float = 0.1
    audio_channels: int = 16
    no_jacobian: bool = False

    def to_dict(self):
        return asdict(self)


def to_whct(x: torch.Tensor) -> torch.Tensor:
    """(C, T, H, W) -> (W, H, C, T)."""
    return x.permute(3, 2, 0, 1)


class AudioFeatureMapEncoder(nn.Module):
    """One 4x41 acoustic frame -> a 2-channel 64x64 feature map (conv + upsampling)."""

    def __init__(self, channels=16, out_channels=2, grid=GRID):
        super().__init__()
        self.channels = channels
        self.conv = nn.Sequential(
            nn.Conv2d(1, channels, 3, padding=1), nn.ReLU(),
            nn.Conv2d(channels, channels, 3, stride=(1, 2), padding=1), nn.ReLU(),
        )
        self.fc = nn.Linear(channels * WINDOWS_PER_FRAME * ((N_FEATURES + 1) // 2), channels * 8 * 8)
        ups = []
        size = 8
        while size < grid:
            ups += [nn.Upsample(scale_factor=2), nn.Conv2d(channels, channels, 3, padding=1), nn.ReLU()]
            size *= 2
        self.up = nn.Sequential(*ups)
        self.out = nn.Conv2d(channels, out_channels, 3, padding=1)

    def forward(self, frames):
        """frames (M, 4, 41) normalized -> (M, 2, 64, 64)."""
        x = self.conv(frames.unsqueeze(1))
        x = F.relu(self.fc(x.flatten(1))).reshape(-1, self.channels, 8, 8)
        return self.out(self.up(x))


class MotionFieldGenerator(nn.Module):
    def __init__(self, config: MotionNetConfig | None = None):
        super().__init__()
        self.config = config = config or MotionNetConfig()
        self.audio_encoder = AudioFeatureMapEncoder(config.audio_channels, 2, config.grid)
        self.hourglass = Hourglass(3, config.block_expansion, 6, config.num_blocks, config.max_features)
        c = self.hourglass.out_filters
        pad = config.head_kernel // 2
        self.kp_head = nn.Conv2d(c, config.num_kp, config.head_kernel, padding=pad)
        # 1x1 Jacobian head applied after heatmap pooling (same map as pooling a 1x1 conv output)
        self.jacobian_weight = nn.Parameter(torch.zeros(config.num_kp, 4, c))
        self.jacobian_bias = nn.Parameter(torch.zeros(config.num_kp, 4))
        self.register_buffer("audio_mean", torch.zeros(N_FEATURES))
        self.register_buffer("audio_std", torch.ones(N_FEATURES))

    def set_audio_stats(self, mean, std):
        self.audio_mean.copy_(torch.as_tensor(mean, dtype=torch.float32))
        self.audio_std.copy_(torch.as_tensor(std, dtype=torch.float32))

    # -- fusion ---------------------------------------------------------------
    def build_fusion_tensor(self, image, pose_maps, audio):
        """image (B, 3, H, W) in [0,1]; pose_maps (B, T, 64, 64); audio (B, T, 4, 41) raw features.

        Returns V (B, 6, T, 64, 64) = [V_I (3), V_S (1), V_A (2)].
        """
        g = self.config.grid
        if image.dim() != 4 or image.shape[1] != 3:
            raise ValueError(f"reference image must be (B, 3, H, W), got {tuple(image.shape)}")
        b, t = pose_maps.shape[:2]
        if pose_maps.shape[2:] != (g, g):
            raise ValueError(f"pose stream must be (B, T, {g}, {g}), got {tuple(pose_maps.shape)}")
        if audio.shape[:2] != (b, t):
            raise ValueError(f"audio stream has T={audio.shape[1]} but pose stream has T={t}")
        if audio.shape[2:] != (WINDOWS_PER_FRAME, N_FEATURES):
            raise ValueError(f"audio frames must be 4x41, got {tuple(audio.shape[2:])}")
        if image.shape[0] != b:
            raise ValueError(f"image batch {image.shape[0]} does not match pose batch {b}")
        v_i = F.interpolate(image, size=(g, g), mode="bilinear", align_corners=False, antialias=True)
        v_i = v_i.unsqueeze(2).expand(b, 3, t, g, g)
        v_s = pose_maps.to(image.dtype).unsqueeze(1)
        normed = (audio.to(image.dtype) - self.audio_mean) / self.audio_std
        v_a = self.audio_encoder(normed.reshape(b * t, WINDOWS_PER_FRAME, N_FEATURES))
        v_a = v_a.reshape(b, t, 2, g, g).transpose(1, 2)
        return torch.cat([v_i, v_s, v_a], dim=1)

    # -- trunk + decoders -----------------------------------------------------
    def hourglass3d_forward(self, v):
        t = v.shape[2]
        if t < TIME_FACTOR or t % TIME_FACTOR:
            raise ValueError(f"T={t} must be a positive multiple of {TIME_FACTOR}")
        return self.hourglass(v)

    def _per_frame(self, latent):
        b, c, t, h, w = latent.shape
        return latent.transpose(1, 2).reshape(b * t, c, h, w), (b, t)

    def decode_keypoints(self, latent):
        """-> heatmaps (B, T, N, H, W), positions (B, T, N, 2)."""
        flat, (b, t) = self._per_frame(latent)
        heatmap = softmax_heatmap(self.kp_head(flat), self.config.temperature)
        heatmap = heatmap.reshape(b, t, *heatmap.shape[1:])
        return heatmap, soft_argmax(heatmap)

    def decode_jacobians(self, latent, heatmap):
        """-> Jacobians (B, T, N, 2, 2) = I + heatmap-weighted residual."""
        b, t, n = heatmap.shape[:3]
        if self.config.no_jacobian:
            return identity_jacobians((b, t), n, latent.dtype, latent.device)
        pooled = torch.einsum("btnhw,bcthw->btnc", heatmap, latent)
        residual = torch.einsum("btnc,nkc->btnk", pooled, self.jacobian_weight) + self.jacobian_bias
        return residual.reshape(b, t, n, 2, 2) + torch.eye(2, dtype=latent.dtype, device=latent.device)

    def forward(self, image, pose_maps, audio):
        """Full N_M pass; T is padded by edge repetition to a multiple of 8 and cropped back."""
        t = pose_maps.shape[1]
        pad = (-t) % TIME_FACTOR
        if pad:
            pose_maps = torch.cat([pose_maps, pose_maps[:, -1:].expand(-1, pad, -1, -1)], dim=1)
            audio = torch.cat([audio, audio[:, -1:].expand(-1, pad, -1, -1)], dim=1)
        v = self.build_fusion_tensor(image, pose_maps, audio)
        latent = self.hourglass3d_forward(v)
        heatmap, value = self.decode_keypoints(latent)
        jacobian = self.decode_jacobians(latent, heatmap)
        return {"heatmap": heatmap[:, :t], "value": value[:, :t], "jacobian": jacobian[:, :t]}

    def temporal_radius(self, length: int) -> int:
        iv = self.hourglass.temporal_intervals(length)
        idx = np.arange(length)
        return int(max((idx - iv[:, 0]).max(), (iv[:, 1] - idx).max()))
