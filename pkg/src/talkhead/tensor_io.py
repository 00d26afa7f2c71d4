"""File formats: raw tensor container, pose CSV, acoustic CSV, PNG frame dirs.

Tensor container layout (all little-endian)::

    offset  size     field
    0       4        magic  b"TKHT"
    4       2        version (uint16) = 1
    6       1        dtype code (uint8): 1 = float32, 2 = uint8, 3 = float64
    7       1        ndim (uint8)
    8       4*ndim   dims (uint32 each); dims[0] is T (frames)
    ...              payload, C order

See docs/formats.md for the per-artifact shapes.
"""
from __future__ import annotations

import csv
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"TKHT"
VERSION = 1
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("u1"), 3: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 1, np.dtype("uint8"): 2, np.dtype("float64"): 3}

POSE_HEADER = ["frame", "rx", "ry", "rz", "tx", "ty", "tz"]


class FormatError(ValueError):
    pass


def write_tensor(path, array) -> None:
    array = np.asarray(array)
    code = _CODES.get(array.dtype)
    if code is None:
        raise FormatError(f"unsupported dtype {array.dtype}")
    if array.ndim == 0 or array.ndim > 255:
        raise FormatError("tensor must have 1..255 dims")
    header = struct.pack("<4sHBB", MAGIC, VERSION, code, array.ndim)
    header += struct.pack(f"<{array.ndim}I", *array.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(array, dtype=_DTYPES[code]).tobytes())


def read_tensor(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise FormatError(f"{path}: truncated header")
    magic, version, code, ndim = struct.unpack_from("<4sHBB", raw, 0)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if code not in _DTYPES:
        raise FormatError(f"{path}: unknown dtype code {code}")
    dims = struct.unpack_from(f"<{ndim}I", raw, 8)
    dtype = _DTYPES[code]
    offset = 8 + 4 * ndim
    count = int(np.prod(dims))
    if len(raw) - offset != count * dtype.itemsize:
        raise FormatError(f"{path}: payload size does not match header dims {dims}")
    return np.frombuffer(raw, dtype=dtype, count=count, offset=offset).reshape(dims).astype(dtype.newbyteorder("="))


def write_keypoints(path, positions, jacobians, config: dict | None = None) -> None:
    """Keypoints as one (T, N, 6) float32 tensor [x, y, j00, j01, j10, j11] + JSON sidecar."""
    positions = np.asarray(positions, dtype=np.float32)
    jacobians = np.asarray(jacobians, dtype=np.float32)
    t, n = positions.shape[:2]
    if positions.shape != (t, n, 2) or jacobians.shape != (t, n, 2, 2):
        raise FormatError("positions must be (T, N, 2) and jacobians (T, N, 2, 2)")
    write_tensor(path, np.concatenate([positions, jacobians.reshape(t, n, 4)], axis=-1))
    sidecar = {"kind": "keypoints", "T": t, "N": n, "layout": "x,y,j00,j01,j10,j11"}
    sidecar.update(config or {})
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))


def read_keypoints(path):
    data = read_tensor(path)
    if data.ndim != 3 or data.shape[2] != 6:
        raise FormatError(f"{path}: keypoint tensor must be (T, N, 6), got {data.shape}")
    return data[..., :2].copy(), data[..., 2:].reshape(data.shape[0], data.shape[1], 2, 2).copy()


def write_pose_csv(path, poses) -> None:
    poses = np.asarray(poses, dtype=np.float32)
    if poses.ndim != 2 or poses.shape[1] != 6:
        raise FormatError(f"poses must be (T, 6), got {poses.shape}")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(POSE_HEADER)
        for i, row in enumerate(poses):
            # repr of the float32 value widened to float64 round-trips exactly
            w.writerow([i] + [repr(float(v)) for v in row])


def read_pose_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader, [])]
        if header[: len(POSE_HEADER)] != POSE_HEADER:
            raise FormatError(f"{path}: expected header {','.join(POSE_HEADER)}, got {','.join(header)}")
        rows = [r for r in reader if r]
    if not rows:
        raise FormatError(f"{path}: no pose rows")
    frames = [int(r[0]) for r in rows]
    if frames != list(range(len(rows))):
        raise FormatError(f"{path}: frame column must be 0..T-1 in order")
    poses = np.array([[float(v) for v in r[1:7]] for r in rows], dtype=np.float32)
    if not np.all(np.isfinite(poses)):
        raise FormatError(f"{path}: non-finite pose values")
    return poses


def write_acoustic_csv(path, frames) -> None:
    """Human-readable dump of a (T, 4, 41) acoustic sequence, one row per window."""
    frames = np.asarray(frames)
    names = ([f"mfcc{i}" for i in range(13)] + [f"fbank{i}" for i in range(26)] + ["pitch", "voicing"])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "window"] + names)
        for t in range(frames.shape[0]):
            for k in range(frames.shape[1]):
                w.writerow([t, k] + [repr(float(v)) for v in frames[t, k]])


def write_frames_dir(directory, frames) -> list[Path]:
    """Write (T, H, W, 3) frames in [0, 1] as frame_00000.png ..."""
    from PIL import Image

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, f in enumerate(np.asarray(frames)):
        p = directory / f"frame_{i:05d}.png"
        Image.fromarray(to_uint8(f)).save(p)
        paths.append(p)
    return paths


def read_frames_dir(directory) -> np.ndarray:
    paths = sorted(Path(directory).glob("*.png"))
    if not paths:
        raise FormatError(f"{directory}: no PNG frames")
    return np.stack([read_image(p) for p in paths])


def read_image(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def to_uint8(image) -> np.ndarray:
    return np.clip(np.round(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
