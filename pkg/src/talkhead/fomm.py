"""First-order motion machinery: keypoint detector N_D, dense motion, occlusion-aware generator N_I.

Keypoints are dicts with ``value`` (B, N, 2) in normalized (x, y) coordinates,
``jacobian`` (B, N, 2, 2) and optionally ``heatmap`` (B, N, H, W).
"""
from __future__ import annotations

from typing import NamedTuple

import torch
import torch.nn.functional as F
from torch import nn

from .layers import Hourglass, ResBlock2d, SameBlock2d, DownBlock, UpBlock
from .layers import make_coordinate_grid, soft_argmax, softmax_heatmap

NUM_KP = 10


class DegenerateTransformError(ValueError):
    pass


class DenseMotionField(NamedTuple):
    flow: torch.Tensor  # (B, H, W, 2) backward-warp sampling coordinates
    occlusion: torch.Tensor | None  # (B, 1, H, W) in [0, 1]
    masks: torch.Tensor  # (B, N+1, H, W), background last


def identity_jacobians(batch_shape, num_kp, dtype=torch.float32, device=None):
    eye = torch.eye(2, dtype=dtype, device=device)
    return eye.expand(*batch_shape, num_kp, 2, 2).clone()


def relative_keypoints(kp_driving, kp_driving_initial, kp_source):
    """Transfer the motion of ``kp_driving`` relative to its first frame onto ``kp_source``.

    value = p_src + (p_drv - p_drv0),  jacobian = J_drv J_drv0^-1 J_src.
    """
    value = kp_source["value"] + (kp_driving["value"] - kp_driving_initial["value"])
    jac = kp_driving["jacobian"] @ torch.linalg.inv(kp_driving_initial["jacobian"]) @ kp_source["jacobian"]
    return {"value": value, "jacobian": jac}


class KeypointDetector(nn.Module):
    """Hourglass + heatmap head (soft-argmax positions) + identity-residual Jacobian head."""

    def __init__(self, num_kp=NUM_KP, num_channels=3, block_expansion=32, max_features=256,
                 num_blocks=3, temperature=0.1, estimate_jacobian=True):
        super().__init__()
        self.num_kp = num_kp
        self.temperature = temperature
        self.predictor = Hourglass(2, block_expansion, num_channels, num_blocks, max_features)
        self.kp = nn.Conv2d(self.predictor.out_filters, num_kp, kernel_size=7, padding=3)
        self.estimate_jacobian = estimate_jacobian
        if estimate_jacobian:
            self.jacobian = nn.Conv2d(self.predictor.out_filters, 4 * num_kp, kernel_size=7, padding=3)
            nn.init.zeros_(self.jacobian.weight)
            nn.init.zeros_(self.jacobian.bias)

    def forward(self, image):
        feature_map = self.predictor(image)
        heatmap = softmax_heatmap(self.kp(feature_map), self.temperature)
        out = {"value": soft_argmax(heatmap), "heatmap": heatmap}
        b, n, h, w = heatmap.shape
        if self.estimate_jacobian:
            residual = self.jacobian(feature_map).reshape(b, n, 4, h, w)
            residual = (residual * heatmap.unsqueeze(2)).sum(dim=(-2, -1)).reshape(b, n, 2, 2)
            out["jacobian"] = residual + torch.eye(2, dtype=image.dtype, device=image.device)
        else:
            out["jacobian"] = identity_jacobians((b,), n, image.dtype, image.device)
        return out


def local_affine_flow(kp_source, kp_driving, grid) -> torch.Tensor:
    """N+1 candidate backward flows, shape (B, N+1, H, W, 2).

    Candidate k sends driving-frame coordinate z to
    ``p_src^k + J_src^k (J_drv^k)^-1 (z - p_drv^k)``; the last candidate is the
    identity (background).
    """
    p_src, p_drv = kp_source["value"], kp_driving["value"]
    if p_src.shape != p_drv.shape:
        raise ValueError(f"keypoint count mismatch: {tuple(p_src.shape)} vs {tuple(p_drv.shape)}")
    b, n, _ = p_drv.shape
    j_src = kp_source.get("jacobian")
    j_drv = kp_driving.get("jacobian")
    coords = grid.to(p_drv.dtype).reshape(1, 1, *grid.shape)  # (1, 1, H, W, 2)
    diff = coords - p_drv.reshape(b, n, 1, 1, 2)
    if j_src is not None and j_drv is not None:
        det = torch.linalg.det(j_drv.detach())
        bad = (det.abs() <= 1e-6).nonzero()
        if len(bad):
            raise DegenerateTransformError(f"singular driving Jacobian at keypoint {int(bad[0, -1])}")
        affine = j_src @ torch.linalg.inv(j_drv)  # (B, N, 2, 2)
        diff = torch.einsum("bnij,bnhwj->bnhwi", affine, diff)
    motions = p_src.reshape(b, n, 1, 1, 2) + diff
    background = coords.expand(b, 1, *grid.shape)
    return torch.cat([motions, background], dim=1)


def combine_dense_motion(candidates, masks, occlusion_logits=None) -> DenseMotionField:
    """Mask-weighted mixture of candidate flows; occlusion = sigmoid(logits)."""
    if candidates.shape[:-1] != masks.shape:
        raise ValueError(f"masks {tuple(masks.shape)} do not match candidates {tuple(candidates.shape)}")
    flow = (masks.unsqueeze(-1) * candidates).sum(dim=1)
    occlusion = None if occlusion_logits is None else torch.sigmoid(occlusion_logits)
    return DenseMotionField(flow, occlusion, masks)


def _resize_flow(flow, size):
    if flow.shape[1:3] == size:
        return flow
    return F.interpolate(flow.permute(0, 3, 1, 2), size=size, mode="bilinear", align_corners=True).permute(0, 2, 3, 1)


def warp(features, field, occlusion=None) -> torch.Tensor:
    """Bilinear backward warp with border padding, gated by the occlusion map.

    ``field`` is a :class:`DenseMotionField` or a bare (B, H, W, 2) flow.
    """
    if isinstance(field, DenseMotionField):
        flow = field.flow
        occlusion = field.occlusion if occlusion is None else occlusion
    else:
        flow = field
    if not torch.isfinite(flow).all():
        raise ValueError("flow contains non-finite values")
    size = tuple(features.shape[-2:])
    out = F.grid_sample(features, _resize_flow(flow, size).to(features.dtype), mode="bilinear",
                        padding_mode="border", align_corners=True)
    if occlusion is not None:
        if occlusion.shape[-2:] != size:
            occlusion = F.interpolate(occlusion, size=size, mode="bilinear", align_corners=True)
        out = out * occlusion
    return out


def kp2gaussian(value, spatial_size, kp_variance):
    """Gaussian bumps around keypoints, (B, N, H, W)."""
    grid = make_coordinate_grid(*spatial_size, dtype=value.dtype, device=value.device)
    diff = grid.reshape(1, 1, *spatial_size, 2) - value.reshape(*value.shape[:2], 1, 1, 2)
    return torch.exp(-0.5 * (diff**2).sum(-1) / kp_variance)


class DenseMotionNetwork(nn.Module):
    """Predicts per-pixel masks over the N+1 candidate flows and an occlusion map."""

    def __init__(self, num_kp=NUM_KP, num_channels=3, block_expansion=16, max_features=128,
                 num_blocks=3, estimate_occlusion_map=True, scale_factor=1.0, kp_variance=0.01):
        super().__init__()
        self.num_kp = num_kp
        self.scale_factor = scale_factor
        self.kp_variance = kp_variance
        in_features = (num_kp + 1) * (num_channels + 1)
        self.hourglass = Hourglass(2, block_expansion, in_features, num_blocks, max_features)
        self.mask = nn.Conv2d(self.hourglass.out_filters, num_kp + 1, kernel_size=7, padding=3)
        self.occlusion = (nn.Conv2d(self.hourglass.out_filters, 1, kernel_size=7, padding=3)
                          if estimate_occlusion_map else None)

    def forward(self, source_image, kp_driving, kp_source) -> DenseMotionField:
        if self.scale_factor != 1:
            source_image = F.interpolate(source_image, scale_factor=self.scale_factor, mode="area")
        b, c, h, w = source_image.shape
        grid = make_coordinate_grid(h, w, dtype=source_image.dtype, device=source_image.device)
        heat = (kp2gaussian(kp_driving["value"], (h, w), self.kp_variance)
                - kp2gaussian(kp_source["value"], (h, w), self.kp_variance))
        heat = torch.cat([heat, torch.zeros_like(heat[:, :1])], dim=1).unsqueeze(2)  # (B, N+1, 1, H, W)

        candidates = local_affine_flow(kp_source, kp_driving, grid)  # (B, N+1, H, W, 2)
        k = candidates.shape[1]
        repeated = source_image.unsqueeze(1).expand(b, k, c, h, w).reshape(b * k, c, h, w)
        deformed = F.grid_sample(repeated, candidates.reshape(b * k, h, w, 2), mode="bilinear",
                                 padding_mode="border", align_corners=True).reshape(b, k, c, h, w)

        prediction = self.hourglass(torch.cat([heat, deformed], dim=2).reshape(b, -1, h, w))
        masks = F.softmax(self.mask(prediction), dim=1)
        occ_logits = self.occlusion(prediction) if self.occlusion is not None else None
        return combine_dense_motion(candidates, masks, occ_logits)


class OcclusionAwareGenerator(nn.Module):
    """Encode the source image, warp its features by the dense motion, gate by occlusion, decode."""

    def __init__(self, num_channels=3, num_kp=NUM_KP, block_expansion=16, max_features=128,
                 num_down_blocks=2, num_bottleneck_blocks=6, dense_motion_params=None):
        super().__init__()
        self.dense_motion_network = DenseMotionNetwork(num_kp=num_kp, num_channels=num_channels,
                                                       **(dense_motion_params or {}))
        self.first = SameBlock2d(num_channels, block_expansion, kernel_size=7, padding=3)
        down = []
        for i in range(num_down_blocks):
            down.append(DownBlock(2, min(max_features, block_expansion * 2**i),
                                  min(max_features, block_expansion * 2 ** (i + 1))))
        self.down_blocks = nn.ModuleList(down)
        up = []
        for i in range(num_down_blocks):
            up.append(UpBlock(2, min(max_features, block_expansion * 2 ** (num_down_blocks - i)),
                              min(max_features, block_expansion * 2 ** (num_down_blocks - i - 1))))
        self.up_blocks = nn.ModuleList(up)
        bottleneck = min(max_features, block_expansion * 2**num_down_blocks)
        self.bottleneck = nn.Sequential(*[ResBlock2d(bottleneck) for _ in range(num_bottleneck_blocks)])
        self.final = nn.Conv2d(block_expansion, num_channels, kernel_size=7, padding=3)

    def forward(self, source_image, kp_driving, kp_source, occlusion_override=None):
        out = self.first(source_image)
        for block in self.down_blocks:
            out = block(out)
        field = self.dense_motion_network(source_image, kp_driving, kp_source)
        occlusion = field.occlusion
        if occlusion_override is not None:
            occlusion = torch.full_like(field.flow[..., :1].permute(0, 3, 1, 2), float(occlusion_override))
        out = warp(out, field.flow, occlusion)
        out = self.bottleneck(out)
        for block in self.up_blocks:
            out = block(out)
        prediction = torch.sigmoid(self.final(out))
        return {"prediction": prediction, "mask": field.masks, "occlusion_map": occlusion,
                "deformation": field.flow}


class TPSTransform:
    """Random thin-plate-spline warp ``T(z) = A z + b + sum_k w_k U(|z - c_k|^2)``.

    ``U(r2) = r2 * log(r2 + eps)``; Jacobians are analytic. Used for the
    equivariance losses: a frame warped by T must yield keypoints that map back
    through T onto the original keypoints.
    """

    EPS = 1e-6

    def __init__(self, batch_size, sigma_affine=0.05, sigma_tps=0.005, points_tps=5,
                 generator=None, dtype=torch.float32, theta=None, control_params=None):
        self.batch_size = batch_size
        g = generator
        if theta is None:
            noise = torch.randn(batch_size, 2, 3, generator=g, dtype=dtype) * sigma_affine
            theta = noise + torch.eye(2, 3, dtype=dtype)
        self.theta = theta.to(dtype)
        self.control_points = make_coordinate_grid(points_tps, points_tps, dtype=dtype).reshape(-1, 2)
        if control_params is None:
            control_params = torch.randn(batch_size, points_tps**2, 2, generator=g, dtype=dtype) * sigma_tps
        self.control_params = control_params.to(dtype)

    @classmethod
    def identity(cls, batch_size, points_tps=5, dtype=torch.float32):
        return cls(batch_size, points_tps=points_tps, dtype=dtype,
                   theta=torch.eye(2, 3, dtype=dtype).expand(batch_size, 2, 3).clone(),
                   control_params=torch.zeros(batch_size, points_tps**2, 2, dtype=dtype))

    @classmethod
    def affine(cls, matrix, offset=None, points_tps=5):
        matrix = torch.as_tensor(matrix)
        b = matrix.shape[0]
        offset = torch.zeros(b, 2, dtype=matrix.dtype) if offset is None else torch.as_tensor(offset)
        theta = torch.cat([matrix, offset.unsqueeze(-1)], dim=-1)
        return cls(b, points_tps=points_tps, dtype=matrix.dtype, theta=theta,
                   control_params=torch.zeros(b, points_tps**2, 2, dtype=matrix.dtype))

    def warp_coordinates(self, coords):
        """coords (B, P, 2) -> T(coords) (B, P, 2)."""
        theta = self.theta.to(coords)
        out = coords @ theta[:, :, :2].transpose(1, 2) + theta[:, :, 2].unsqueeze(1)
        diff = coords.unsqueeze(2) - self.control_points.to(coords).reshape(1, 1, -1, 2)  # (B, P, K, 2)
        r2 = (diff**2).sum(-1)
        u = r2 * torch.log(r2 + self.EPS)
        return out + u @ self.control_params.to(coords)

    def jacobian(self, coords):
        """Analytic dT/dz at coords, shape (B, P, 2, 2)."""
        theta = self.theta.to(coords)
        diff = coords.unsqueeze(2) - self.control_points.to(coords).reshape(1, 1, -1, 2)
        r2 = (diff**2).sum(-1, keepdim=True)
        grad_u = (torch.log(r2 + self.EPS) + r2 / (r2 + self.EPS)) * 2.0 * diff  # (B, P, K, 2)
        tps = torch.einsum("bki,bpkj->bpij", self.control_params.to(coords), grad_u)
        return theta[:, :, :2].unsqueeze(1) + tps

    def transform_frame(self, frame):
        """Resample ``frame`` so output(z) = frame(T(z))."""
        b, _, h, w = frame.shape
        grid = make_coordinate_grid(h, w, dtype=frame.dtype, device=frame.device).reshape(1, -1, 2)
        grid = self.warp_coordinates(grid.expand(b, -1, 2)).reshape(b, h, w, 2)
        return F.grid_sample(frame, grid, mode="bilinear", padding_mode="reflection", align_corners=True)


def equivariance_losses(kp, kp_transformed, transform: TPSTransform):
    """(L_eq^P, L_eq^J) for keypoints ``kp`` of a frame and ``kp_transformed`` of its T-warped copy.

    L_eq^P = mean |p - T(p_t)|,  L_eq^J = mean |I - J^-1 (dT(p_t) J_t)|.
    Leading batch axes of ``kp`` beyond the transform batch are flattened.
    """
    value, value_t = kp["value"], kp_transformed["value"]
    b = transform.batch_size
    vt = value_t.reshape(b, -1, 2)
    loss_p = (value.reshape(b, -1, 2) - transform.warp_coordinates(vt)).abs().mean()
    jac_t = transform.jacobian(vt) @ kp_transformed["jacobian"].reshape(b, -1, 2, 2)
    normed = torch.linalg.solve(kp["jacobian"].reshape(b, -1, 2, 2), jac_t)
    eye = torch.eye(2, dtype=normed.dtype, device=normed.device)
    loss_j = (eye - normed).abs().mean()
    return loss_p, loss_j
