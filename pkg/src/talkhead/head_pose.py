"""Head motion predictor N_H: reference image + acoustic frames -> 6-DoF pose sequence.

At each step the audio embedding of frame i is concatenated with the previous
spatial embedding e_{i-1} (spatial embedding transition, SET) and fed through a
two-layer LSTM whose top hidden state is e_i; a small decoder maps e_i to a
normalized pose (rx, ry, rz, tx, ty, tz).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import torch
import torch.nn.functional as F
from torch import nn

from .audio import N_FEATURES, WINDOWS_PER_FRAME
from .layers import ResNetEncoder

POSE_DIM = 6


@dataclass
class HeadPoseConfig:
    embed_dim: int = 256
    audio_dim: int = 256
    resnet_width: int = 64
    resnet_layers: tuple = (3, 4, 6, 3)
    image_size: int = 256
    no_set: bool = False
    pose_loss: str = "ssim"  # or "l1"
    dynamic_range: float = 8.0
    disc_channels: tuple = (64, 128, 256)
    disc_kernel: int = 4
    disc_strides: tuple = (2, 2, 1, 1)
    gan_weight: float = 1.0
    pose_weight: float = 1.0
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        d = asdict(self)
        d["resnet_layers"] = list(self.resnet_layers)
        d["disc_channels"] = list(self.disc_channels)
        d["disc_strides"] = list(self.disc_strides)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("resnet_layers", "disc_channels", "disc_strides"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


class RecurrentState(NamedTuple):
    h1: torch.Tensor
    c1: torch.Tensor
    h2: torch.Tensor
    c2: torch.Tensor


class HeadMotionPredictor(nn.Module):
    def __init__(self, config: HeadPoseConfig | None = None):
        super().__init__()
        self.config = config = config or HeadPoseConfig()
        self.image_encoder = ResNetEncoder(3, config.embed_dim, config.resnet_width, config.resnet_layers)
        self.audio_encoder = ResNetEncoder(1, config.audio_dim, config.resnet_width, config.resnet_layers,
                                           stem_stride=1, stem_pool=False)
        self.cell1 = nn.LSTMCell(config.audio_dim + config.embed_dim, config.embed_dim)
        self.cell2 = nn.LSTMCell(config.embed_dim, config.embed_dim)
        self.decoder = nn.Sequential(nn.Linear(config.embed_dim, config.embed_dim // 2), nn.ReLU(),
                                     nn.Linear(config.embed_dim // 2, POSE_DIM))
        self.register_buffer("audio_mean", torch.zeros(N_FEATURES))
        self.register_buffer("audio_std", torch.ones(N_FEATURES))
        self.register_buffer("pose_mean", torch.zeros(POSE_DIM))
        self.register_buffer("pose_std", torch.ones(POSE_DIM))

    def set_stats(self, audio_mean=None, audio_std=None, pose_mean=None, pose_std=None):
        for name, value in (("audio_mean", audio_mean), ("audio_std", audio_std),
                            ("pose_mean", pose_mean), ("pose_std", pose_std)):
            if value is not None:
                getattr(self, name).copy_(torch.as_tensor(value, dtype=torch.float32))

    def normalize_poses(self, poses):
        return (poses - self.pose_mean) / self.pose_std

    def denormalize_poses(self, poses):
        return poses * self.pose_std + self.pose_mean

    def encode_reference(self, image):
        """(B, 3, S, S) image in [0, 1] -> initial spatial embedding e_0 (B, embed_dim)."""
        if image.dim() == 3:
            image = image.unsqueeze(0)
        if image.dim() != 4 or image.shape[1] != 3 or image.shape[2] != image.shape[3]:
            raise ValueError(f"reference image must be square (B, 3, S, S), got {tuple(image.shape)}")
        if not torch.isfinite(image).all():
            raise ValueError("reference image contains non-finite pixels")
        if image.min() < 0 or image.max() > 1:
            raise ValueError("reference image values must lie in [0, 1]")
        return self.image_encoder(image)

    def encode_audio_frame(self, frames):
        """(M, 4, 41) raw acoustic frames -> (M, audio_dim)."""
        if frames.dim() == 2:
            frames = frames.unsqueeze(0)
        if frames.shape[-2:] != (WINDOWS_PER_FRAME, N_FEATURES):
            raise ValueError(f"acoustic frame must be 4x41, got {tuple(frames.shape[-2:])}")
        normed = (frames - self.audio_mean) / self.audio_std
        return self.audio_encoder(normed.unsqueeze(1))

    def initial_state(self, batch_size, dtype=torch.float32, device=None):
        z = torch.zeros(batch_size, self.config.embed_dim, dtype=dtype, device=device)
        return RecurrentState(z, z, z, z)

    def step(self, state: RecurrentState, audio_emb, prev_embedding):
        """One recurrent step -> (new state, e_i, normalized pose)."""
        if audio_emb.shape[-1] != self.config.audio_dim or prev_embedding.shape[-1] != self.config.embed_dim:
            raise ValueError("embedding dimensions do not match the model configuration")
        if self.config.no_set:
            prev_embedding = torch.zeros_like(prev_embedding)
        h1, c1 = self.cell1(torch.cat([audio_emb, prev_embedding], dim=-1), (state.h1, state.c1))
        h2, c2 = self.cell2(h1, (state.h2, state.c2))
        return RecurrentState(h1, c1, h2, c2), h2, self.decoder(h2)

    def forward(self, image, audio):
        """image (B, 3, S, S), audio (B, T, 4, 41) -> normalized poses (B, T, 6)."""
        b, t = audio.shape[:2]
        emb = self.encode_audio_frame(audio.reshape(b * t, WINDOWS_PER_FRAME, N_FEATURES)).reshape(b, t, -1)
        e = self.encode_reference(image)
        state = self.initial_state(b, e.dtype, e.device)
        poses = []
        for i in range(t):
            state, e, pose = self.step(state, emb[:, i], e)
            poses.append(pose)
        return torch.stack(poses, dim=1)

    @torch.no_grad()
    def predict(self, image, audio):
        """Denormalized (B, T, 6) poses in eval mode."""
        was_training = self.training
        self.eval()
        try:
            return self.denormalize_poses(self(image, audio))
        finally:
            self.train(was_training)


def ssim_pose_loss(pred, gt, dynamic_range: float = 8.0):
    """1 - SSIM computed with global statistics over each whole (T, 6) pose matrix.

    Accepts (T, 6) or (B, T, 6); batched inputs return the batch mean.
    """
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(gt.shape)}")
    if pred.dim() < 2 or pred.shape[-2] < 2:
        raise ValueError("pose sequences need T >= 2")
    c1 = (0.01 * dynamic_range) ** 2
    c2 = (0.03 * dynamic_range) ** 2
    x = pred.reshape(-1, pred.shape[-2] * pred.shape[-1])
    y = gt.reshape(-1, gt.shape[-2] * gt.shape[-1])
    mu_x, mu_y = x.mean(dim=1), y.mean(dim=1)
    dx, dy = x - mu_x[:, None], y - mu_y[:, None]
    var_x, var_y = (dx * dx).mean(dim=1), (dy * dy).mean(dim=1)
    cov = (dx * dy).mean(dim=1)
    ssim = ((2 * mu_x * mu_y + c1) * (2 * cov + c2)) / ((mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2))
    return (1.0 - ssim).mean()


def l1_pose_loss(pred, gt):
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(gt.shape)}")
    return (pred - gt).abs().mean()


class PatchDiscriminator1d(nn.Module):
    """PatchGAN over time: 1D convs on the (B, 6, T) pose sequence, one score per temporal patch."""

    def __init__(self, in_channels=POSE_DIM, channels=(64, 128, 256), kernel_size=4, strides=(2, 2, 1, 1)):
        super().__init__()
        widths = [in_channels, *channels, 1]
        if len(strides) != len(widths) - 1:
            raise ValueError("need one stride per conv layer")
        self.kernel_size = kernel_size
        self.strides = tuple(strides)
        layers = []
        for i, stride in enumerate(strides):
            layers.append(nn.Conv1d(widths[i], widths[i + 1], kernel_size, stride=stride))
            if i < len(strides) - 1:
                if i > 0:
                    layers.append(nn.BatchNorm1d(widths[i + 1]))
                layers.append(nn.LeakyReLU(0.2))
        self.net = nn.Sequential(*layers)

    @property
    def receptive_field(self) -> int:
        rf, jump = 1, 1
        for s in self.strides:
            rf += (self.kernel_size - 1) * jump
            jump *= s
        return rf

    @property
    def total_stride(self) -> int:
        out = 1
        for s in self.strides:
            out *= s
        return out

    def output_length(self, length: int) -> int:
        for s in self.strides:
            length = (length - self.kernel_size) // s + 1
        return length

    def forward(self, seq):
        """seq (B, T, 6) -> patch scores (B, L)."""
        if seq.shape[-2] < self.receptive_field:
            raise ValueError(f"sequence length {seq.shape[-2]} shorter than receptive field {self.receptive_field}")
        return self.net(seq.transpose(1, 2)).squeeze(1)


def lsgan_d_loss(real_scores, fake_scores):
    return 0.5 * (F.mse_loss(real_scores, torch.ones_like(real_scores))
                  + F.mse_loss(fake_scores, torch.zeros_like(fake_scores)))


def lsgan_g_loss(fake_scores):
    return F.mse_loss(fake_scores, torch.ones_like(fake_scores))
