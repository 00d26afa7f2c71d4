"""Render 6-DoF head poses as binary wireframe-box images (the pose channel of N_M)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from . import kernels

# head box: width (x), height (y), depth (z) in box units, centered on the head origin
BOX_SIZE = (1.0, 1.3, 1.1)
NEAR = 1e-3

# vertex i has sign bits (x, y, z) = bits of i
_CORNERS = np.array([[(i >> 2) & 1, (i >> 1) & 1, i & 1] for i in range(8)], dtype=np.float64) - 0.5
_EDGES = [(a, b) for a in range(8) for b in range(a + 1, 8) if bin(a ^ b).count("1") == 1]


class OutOfFrustumError(ValueError):
    pass


@dataclass(frozen=True)
class CameraModel:
    focal: float = 64.0
    principal_point: tuple[float, float] = (32.0, 32.0)
    image_size: tuple[int, int] = (64, 64)  # (W, H)
    distance: float = 3.0  # depth of the head origin at zero translation

    def __post_init__(self):
        w, h = self.image_size
        cx, cy = self.principal_point
        if self.focal <= 0:
            raise ValueError("focal must be positive")
        if not (0 <= cx <= w and 0 <= cy <= h):
            raise ValueError("principal point must lie inside the image")

    @property
    def translation_scale(self) -> float:
        """World units per normalized translation unit (one image half-width at the base depth)."""
        return 0.5 * self.image_size[0] * self.distance / self.focal


def box_vertices(pose, cam: CameraModel = CameraModel()) -> np.ndarray:
    """Camera-space (x right, y down, z forward) corners of the head box, shape (8, 3)."""
    pose = np.asarray(pose, dtype=np.float64)
    if pose.shape != (6,) or not np.all(np.isfinite(pose)):
        raise ValueError("pose must be 6 finite values (rx, ry, rz, tx, ty, tz)")
    rot = Rotation.from_rotvec(pose[:3]).as_matrix()
    center = pose[3:] * cam.translation_scale + np.array([0.0, 0.0, cam.distance])
    return center + (_CORNERS * np.array(BOX_SIZE)) @ rot.T


def project(points, cam: CameraModel = CameraModel()) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    cx, cy = cam.principal_point
    return np.stack([cx + cam.focal * points[..., 0] / points[..., 2],
                     cy + cam.focal * points[..., 1] / points[..., 2]], axis=-1)


def _clip_near(p, q):
    if p[2] < NEAR and q[2] < NEAR:
        return None
    if p[2] < NEAR:
        p = p + (q - p) * (NEAR - p[2]) / (q[2] - p[2])
    elif q[2] < NEAR:
        q = q + (p - q) * (NEAR - q[2]) / (p[2] - q[2])
    return p, q


def _clip_rect(a, b, lo, hi):
    """Liang-Barsky clip of segment a->b to the box [lo, hi]^2 (per axis)."""
    t0, t1 = 0.0, 1.0
    d = b - a
    for axis in range(2):
        for p, q in ((-d[axis], a[axis] - lo[axis]), (d[axis], hi[axis] - a[axis])):
            if p == 0:
                if q < 0:
                    return None
                continue
            r = q / p
            if p < 0:
                t0 = max(t0, r)
            else:
                t1 = min(t1, r)
            if t0 > t1:
                return None
    return a + t0 * d, a + t1 * d


def pose_segments(pose, cam: CameraModel = CameraModel()) -> np.ndarray:
    """Integer pixel segments (x0, y0, x1, y1) of the projected box edges."""
    verts = box_vertices(pose, cam)
    if np.all(verts[:, 2] < NEAR):
        raise OutOfFrustumError("head box is entirely behind the camera")
    w, h = cam.image_size
    lo, hi = np.array([-1.0, -1.0]), np.array([w + 1.0, h + 1.0])
    segs = []
    for a, b in _EDGES:
        clipped = _clip_near(verts[a], verts[b])
        if clipped is None:
            continue
        p2, q2 = project(np.stack(clipped), cam)
        clipped = _clip_rect(p2, q2, lo, hi)
        if clipped is None:
            continue
        p2, q2 = clipped
        segs.append([int(np.floor(p2[0])), int(np.floor(p2[1])), int(np.floor(q2[0])), int(np.floor(q2[1]))])
    return np.array(segs, dtype=np.int64).reshape(-1, 4)


def render_pose_box(pose, cam: CameraModel = CameraModel()) -> np.ndarray:
    """Binary (H, W) uint8 image of the projected wireframe head box."""
    w, h = cam.image_size
    canvas = np.zeros((h, w), dtype=np.uint8)
    kernels.draw_segments(canvas, pose_segments(pose, cam))
    if not canvas.any():
        raise OutOfFrustumError("head box projects outside the image")
    return canvas


def render_pose_sequence(poses, cam: CameraModel = CameraModel()) -> np.ndarray:
    """Stack of box images, shape (T, H, W) uint8. Errors name the failing frame."""
    poses = np.asarray(poses)
    if poses.ndim != 2 or poses.shape[1] != 6:
        raise ValueError(f"poses must be (T, 6), got {poses.shape}")
    out = np.empty((poses.shape[0], cam.image_size[1], cam.image_size[0]), dtype=np.uint8)
    for t, pose in enumerate(poses):
        try:
            out[t] = render_pose_box(pose, cam)
        except OutOfFrustumError as exc:
            raise OutOfFrustumError(f"frame {t}: {exc}") from None
    return out
