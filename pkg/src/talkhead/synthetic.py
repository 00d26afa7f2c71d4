"""Deterministic synthetic data: a 64-frame talking-blob clip and small WAV fixtures.

The clip has a static textured background, a head ellipse that moves and turns
with a smooth 6-DoF pose track, and a mouth whose opening follows the loudness
of a formant-filtered pulse-train "speech" signal.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from .audio import FPS, SAMPLE_RATE, AudioClip, save_wav
from .pose_render import CameraModel
from .tensor_io import write_frames_dir, write_pose_csv

CLIP_FRAMES = 64
CLIP_SIZE = 64
HEAD_RADII = (11.0, 14.0)  # (x, y) in pixels at the base depth


def tone(freq=440.0, duration=1.0, amplitude=0.5, sr=SAMPLE_RATE) -> AudioClip:
    t = np.arange(int(round(duration * sr))) / sr
    return AudioClip(amplitude * np.sin(2 * np.pi * freq * t), sr)


def silence(duration=1.0, sr=SAMPLE_RATE) -> AudioClip:
    return AudioClip(np.zeros(int(round(duration * sr))), sr)


def _resonator(x, freq, bandwidth, sr):
    r = np.exp(-np.pi * bandwidth / sr)
    theta = 2 * np.pi * freq / sr
    return lfilter([1 - r], [1, -2 * r * np.cos(theta), r * r], x)


def syllable_envelope(n_samples, sr=SAMPLE_RATE, rate=3.5, seed=0) -> np.ndarray:
    """Smooth 0..1 loudness contour made of raised-cosine syllables with short gaps."""
    rng = np.random.default_rng(seed)
    env = np.zeros(n_samples)
    pos = int(0.08 * sr)
    while pos < n_samples:
        length = int(sr / rate * rng.uniform(0.6, 1.0))
        seg = np.hanning(length) * rng.uniform(0.5, 1.0)
        end = min(n_samples, pos + length)
        env[pos:end] = np.maximum(env[pos:end], seg[: end - pos])
        pos += length + int(sr * rng.uniform(0.03, 0.12))
    return env


def speech_like(duration=1.0, sr=SAMPLE_RATE, seed=0) -> tuple[AudioClip, np.ndarray]:
    """Glottal pulse train through three formant resonators, gated by syllables.

    Returns the clip and its sample-level loudness envelope.
    """
    n = int(round(duration * sr))
    t = np.arange(n) / sr
    f0 = 120.0 + 25.0 * np.sin(2 * np.pi * 0.7 * t)
    phase = np.cumsum(f0 / sr)
    pulses = np.diff(np.floor(phase), prepend=0.0)
    src = lfilter([1.0], [1.0, -0.95], pulses)
    voiced = sum(_resonator(src, f, bw, sr) for f, bw in ((700, 90), (1200, 110), (2600, 160)))
    voiced /= np.max(np.abs(voiced)) + 1e-12
    env = syllable_envelope(n, sr, seed=seed)
    noise = np.random.default_rng(seed + 1).normal(0, 0.003, n)
    return AudioClip(0.6 * voiced * env + noise, sr), env


def frame_envelope(env, num_frames, sr=SAMPLE_RATE) -> np.ndarray:
    """Mean loudness per 40 ms video frame."""
    per = sr // FPS
    padded = np.zeros(num_frames * per)
    padded[: min(len(env), len(padded))] = env[: len(padded)]
    return padded.reshape(num_frames, per).mean(axis=1)


def synthetic_poses(num_frames=CLIP_FRAMES, openness=None) -> np.ndarray:
    t = np.arange(num_frames) / FPS
    openness = np.zeros(num_frames) if openness is None else openness
    poses = np.stack([
        0.12 * np.sin(2 * np.pi * 0.45 * t) + 0.08 * openness,
        0.25 * np.sin(2 * np.pi * 0.3 * t + 0.5),
        0.08 * np.sin(2 * np.pi * 0.5 * t + 1.0),
        0.06 * np.sin(2 * np.pi * 0.25 * t),
        0.04 * np.sin(2 * np.pi * 0.35 * t + 2.0),
        0.03 * np.sin(2 * np.pi * 0.2 * t + 0.3),
    ], axis=1)
    return poses.astype(np.float32)


def _background(size):
    yy, xx = np.mgrid[0:size, 0:size] / size
    base = np.stack([0.25 + 0.35 * yy, 0.35 + 0.2 * xx, 0.55 - 0.2 * yy], axis=-1)
    texture = 0.06 * np.sin(2 * np.pi * (3 * xx + 2 * yy))[..., None] * np.array([1.0, 0.6, 0.3])
    return np.clip(base + texture, 0, 1)


def _soft_ellipse(xx, yy, cx, cy, rx, ry, angle=0.0):
    c, s = np.cos(angle), np.sin(angle)
    dx, dy = xx - cx, yy - cy
    u = (c * dx + s * dy) / rx
    v = (-s * dx + c * dy) / ry
    dist = (np.sqrt(u * u + v * v) - 1.0) * min(rx, ry)
    return np.clip(0.5 - dist, 0.0, 1.0)


def head_geometry(pose, cam: CameraModel):
    """Pixel center, radii scale and in-plane angle of the head for one pose."""
    rx, ry, rz, tx, ty, tz = [float(v) for v in pose]
    depth = cam.distance + tz * cam.translation_scale
    cx = cam.principal_point[0] + cam.focal * tx * cam.translation_scale / depth
    cy = cam.principal_point[1] + cam.focal * ty * cam.translation_scale / depth
    return cx, cy, cam.distance / depth, rz


def render_frame(pose, openness, size=CLIP_SIZE, cam: CameraModel | None = None) -> np.ndarray:
    cam = cam or CameraModel(image_size=(size, size), principal_point=(size / 2, size / 2), focal=float(size))
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    img = _background(size)
    cx, cy, scale, angle = head_geometry(pose, cam)
    rx_, ry_ = HEAD_RADII[0] * scale, HEAD_RADII[1] * scale
    c, s = np.cos(angle), np.sin(angle)

    def place(ox, oy):
        # offsets in head coordinates, shifted by yaw / pitch, rotated by roll
        ox = ox + 6.0 * np.sin(float(pose[1])) * scale
        oy = oy + 6.0 * np.sin(float(pose[0])) * scale
        return cx + c * ox - s * oy, cy + s * ox + c * oy

    def paint(alpha, color):
        nonlocal img
        img = img * (1 - alpha[..., None]) + alpha[..., None] * np.asarray(color)

    paint(_soft_ellipse(xx, yy, cx, cy - 0.25 * ry_, rx_ * 1.05, ry_ * 0.8, angle), (0.25, 0.15, 0.1))
    paint(_soft_ellipse(xx, yy, cx, cy, rx_, ry_, angle), (0.9, 0.7, 0.55))
    for side in (-1, 1):
        ex, ey = place(side * 4.5 * scale, -3.5 * scale)
        paint(_soft_ellipse(xx, yy, ex, ey, 1.8 * scale, 1.4 * scale, angle), (0.1, 0.1, 0.15))
    mx, my = place(0.0, 6.0 * scale)
    paint(_soft_ellipse(xx, yy, mx, my, 4.0 * scale, (0.8 + 3.2 * openness) * scale, angle), (0.55, 0.1, 0.15))
    return np.clip(img, 0, 1).astype(np.float32)


def face_box(poses, size=CLIP_SIZE, margin=3) -> tuple[int, int, int, int]:
    """(x0, y0, x1, y1) box covering the head in every frame; the rest is static background."""
    cam = CameraModel(image_size=(size, size), principal_point=(size / 2, size / 2), focal=float(size))
    boxes = []
    for pose in poses:
        cx, cy, scale, _ = head_geometry(pose, cam)
        r = max(HEAD_RADII) * scale * 1.1 + margin
        boxes.append((cx - r, cy - r, cx + r, cy + r))
    b = np.array(boxes)
    x0, y0 = np.floor(b[:, :2].min(0)).astype(int)
    x1, y1 = np.ceil(b[:, 2:].max(0)).astype(int)
    return max(0, int(x0)), max(0, int(y0)), min(size, int(x1)), min(size, int(y1))


def make_clip(num_frames=CLIP_FRAMES, size=CLIP_SIZE, seed=0):
    """-> dict(frames (T,H,W,3), audio AudioClip, poses (T,6), openness (T,), face_box)."""
    clip, env = speech_like(num_frames / FPS, seed=seed)
    openness = frame_envelope(env, num_frames)
    openness = openness / (openness.max() + 1e-12)
    poses = synthetic_poses(num_frames, openness)
    frames = np.stack([render_frame(p, o, size) for p, o in zip(poses, openness)])
    return {"frames": frames, "audio": clip, "poses": poses, "openness": openness,
            "face_box": face_box(poses, size)}


def write_clip(directory, clip_id="synthetic", num_frames=CLIP_FRAMES, size=CLIP_SIZE, seed=0) -> Path:
    """Write a clip (PNG frames, WAV, pose CSV) and a one-entry manifest; returns the manifest path."""
    directory = Path(directory)
    data = make_clip(num_frames, size, seed)
    clip_dir = directory / clip_id
    write_frames_dir(clip_dir / "frames", data["frames"])
    save_wav(clip_dir / "audio.wav", data["audio"])
    write_pose_csv(clip_dir / "poses.csv", data["poses"])
    manifest = {
        "split": "train",
        "entries": [{
            "clip_id": clip_id,
            "frames_dir": f"{clip_id}/frames",
            "audio_path": f"{clip_id}/audio.wav",
            "pose_csv": f"{clip_id}/poses.csv",
            "fps": FPS,
            "face_box": list(data["face_box"]),
        }],
    }
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path


def write_fixtures(directory) -> dict:
    """silence / 440 Hz tone / speech-like WAV fixtures (1 s each)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {}
    for name, clip in (("silence", silence()), ("tone440", tone()), ("speech", speech_like(1.0, seed=3)[0])):
        paths[name] = directory / f"{name}.wav"
        save_wav(paths[name], clip)
    return paths
