"""Inference stages chained through files: audio -> poses -> box maps -> keypoints -> frames.

Each stage reads its inputs from disk and writes its output to disk, so running
``generate`` is byte-identical to invoking the stages one after another.
"""
from __future__ import annotations

import shutil
import tempfile
from pathlib import Path

import numpy as np
import torch

from . import audio as audio_mod
from .fomm import relative_keypoints
from .pose_render import OutOfFrustumError
from .tensor_io import (read_image, read_keypoints, read_pose_csv, read_tensor, write_frames_dir,
                        write_keypoints, write_pose_csv, write_tensor)
from .training import load_fomm, load_head, load_motion, render_pose_maps, resize_square


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


def _load_reference(path, stage) -> torch.Tensor:
    try:
        img = read_image(path)
    except (OSError, ValueError) as exc:
        raise StageError(stage, f"cannot read reference image {path}: {exc}") from None
    if img.shape[0] != img.shape[1]:
        raise StageError(stage, f"reference image must be square, got {img.shape[1]}x{img.shape[0]}")
    return torch.from_numpy(img).permute(2, 0, 1).unsqueeze(0)


def _load_features(features_path=None, audio_path=None, stage="extract-features") -> np.ndarray:
    if features_path is not None:
        return read_tensor(features_path)
    try:
        return audio_mod.extract_features(audio_mod.load_wav(audio_path)).frames
    except (OSError, ValueError) as exc:
        raise StageError(stage, f"cannot read audio {audio_path}: {exc}") from None


def extract_features_stage(audio_path, out_path) -> np.ndarray:
    frames = _load_features(audio_path=audio_path)
    write_tensor(out_path, frames)
    return frames


def predict_pose_stage(image_path, head_ckpt, out_csv, features_path=None, audio_path=None) -> np.ndarray:
    stage = "predict-pose"
    model, _, _ = load_head(head_ckpt)
    image = resize_square(_load_reference(image_path, stage), model.config.image_size)
    feats = _load_features(features_path, audio_path, stage)
    if len(feats) < 2:
        raise StageError(stage, f"need at least 2 acoustic frames, got {len(feats)}")
    with torch.no_grad():
        poses = model.predict(image, torch.from_numpy(feats).unsqueeze(0))[0].numpy()
    write_pose_csv(out_csv, poses)
    return poses


def render_pose_stage(pose_csv, out_path, png_dir=None) -> np.ndarray:
    poses = read_pose_csv(pose_csv)
    try:
        maps = render_pose_maps(poses).astype(np.uint8)
    except OutOfFrustumError as exc:
        raise StageError("render-pose", str(exc)) from None
    write_tensor(out_path, maps)
    if png_dir is not None:
        write_frames_dir(png_dir, np.repeat(maps[..., None].astype(np.float32), 3, axis=-1))
    return maps


def predict_keypoints_stage(image_path, pose_maps_path, motion_ckpt, out_path, features_path=None,
                            audio_path=None, no_jacobian=False):
    stage = "predict-keypoints"
    model, meta, config = load_motion(motion_ckpt)
    if no_jacobian:
        model.config.no_jacobian = True
    image = resize_square(_load_reference(image_path, stage), config.get("general", "image_size", int))
    maps = read_tensor(pose_maps_path).astype(np.float32)
    feats = _load_features(features_path, audio_path, stage)
    if len(maps) != len(feats):
        raise StageError(stage, f"pose stream has T={len(maps)} but audio stream has T={len(feats)}")
    with torch.no_grad():
        pred = model(image, torch.from_numpy(maps).unsqueeze(0), torch.from_numpy(feats).unsqueeze(0))
    value, jac = pred["value"][0].numpy(), pred["jacobian"][0].numpy()
    write_keypoints(out_path, value, jac, {"motion_hash": meta["module_hashes"]["motion"],
                                           "fomm_hash": meta["fomm_hash"]})
    return value, jac


def render_video_stage(image_path, keypoints_path, fomm_ckpt, out_dir, tensor_path=None,
                       relative=False) -> np.ndarray:
    """Render one frame per keypoint row.

    By default the keypoints drive N_I directly. ``relative`` instead applies their motion
    relative to the first row on top of the detector keypoints of the image.
    """
    stage = "render-video"
    detector, generator, _, config = load_fomm(fomm_ckpt)
    image = resize_square(_load_reference(image_path, stage), config.get("general", "image_size", int))
    value, jac = read_keypoints(keypoints_path)
    if value.shape[1] != detector.num_kp:
        raise StageError(stage, f"keypoint file has N={value.shape[1]}, detector expects {detector.num_kp}")
    frames = []
    with torch.no_grad():
        kp_src = detector(image)
        kp_first = {"value": torch.from_numpy(value[:1]), "jacobian": torch.from_numpy(jac[:1])}
        for t in range(len(value)):
            kp = {"value": torch.from_numpy(value[t:t + 1]), "jacobian": torch.from_numpy(jac[t:t + 1])}
            if relative:
                kp = relative_keypoints(kp, kp_first, kp_src)
            frames.append(generator(image, kp_driving=kp, kp_source=kp_src)["prediction"][0])
    out = torch.stack(frames).permute(0, 2, 3, 1).numpy()
    write_frames_dir(out_dir, out)
    if tensor_path is not None:
        write_tensor(tensor_path, out.astype(np.float32))
    return out


def check_compatibility(motion_ckpt, fomm_ckpt):
    from .training import read_checkpoint

    m_meta = read_checkpoint(motion_ckpt)[0]
    f_meta = read_checkpoint(fomm_ckpt, "fomm")[0]
    if m_meta.get("fomm_hash") != f_meta.get("model_hash"):
        raise StageError("generate", f"motion checkpoint expects detector/generator {m_meta.get('fomm_hash')}, "
                                     f"but {fomm_ckpt} is {f_meta.get('model_hash')}")


def generate(image_path, audio_path, out_dir, head_ckpt=None, motion_ckpt=None, fomm_ckpt=None,
             pose_csv=None, keypoints_path=None, dump_intermediates=False, seed=0, no_jacobian=False,
             relative=False) -> dict:
    """Full pipeline. ``pose_csv`` bypasses N_H; ``keypoints_path`` bypasses N_H and N_M.

    Always writes ``frames/``, and ``poses.csv`` / ``keypoints.tkt`` when produced.
    Intermediate tensors go to ``intermediates/`` with ``dump_intermediates``.
    """
    torch.manual_seed(seed)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if fomm_ckpt is None:
        raise StageError("generate", "a detector/generator checkpoint is required")
    if keypoints_path is None:
        if motion_ckpt is None:
            raise StageError("generate", "a motion checkpoint is required unless keypoints are given")
        if pose_csv is None and head_ckpt is None:
            raise StageError("generate", "a head checkpoint is required unless poses are given")
        check_compatibility(motion_ckpt, fomm_ckpt)
    work = out_dir / "intermediates" if dump_intermediates else Path(tempfile.mkdtemp(prefix="talkhead-"))
    work.mkdir(parents=True, exist_ok=True)
    result = {"out_dir": out_dir}
    try:
        if keypoints_path is None:
            feats_path = work / "features.tkt"
            feats = extract_features_stage(audio_path, feats_path)
            poses_path = out_dir / "poses.csv"
            if pose_csv is not None:
                poses = read_pose_csv(pose_csv)
                if len(poses) != len(feats):
                    raise StageError("generate", f"pose CSV has {len(poses)} rows but audio gives T={len(feats)}")
                write_pose_csv(poses_path, poses)
            else:
                predict_pose_stage(image_path, head_ckpt, poses_path, features_path=feats_path)
            maps_path = work / "pose_maps.tkt"
            render_pose_stage(poses_path, maps_path)
            keypoints_path = out_dir / "keypoints.tkt"
            predict_keypoints_stage(image_path, maps_path, motion_ckpt, keypoints_path,
                                    features_path=feats_path, no_jacobian=no_jacobian)
            result["poses"] = poses_path
        else:
            src = Path(keypoints_path)
            keypoints_path = out_dir / "keypoints.tkt"
            if src.resolve() != keypoints_path.resolve():
                shutil.copyfile(src, keypoints_path)
                if Path(str(src) + ".json").exists():
                    shutil.copyfile(str(src) + ".json", str(keypoints_path) + ".json")
        result["keypoints"] = keypoints_path
        frames = render_video_stage(image_path, keypoints_path, fomm_ckpt, out_dir / "frames", relative=relative)
        result["num_frames"] = len(frames)
    finally:
        if not dump_intermediates:
            shutil.rmtree(work, ignore_errors=True)
    return result
