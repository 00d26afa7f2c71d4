"""Configuration, data, checkpoints and the four training procedures (N_D+N_I, N_M stage 1/2, N_H)."""
from __future__ import annotations

import configparser
import copy
import csv
import hashlib
import io
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import audio as audio_mod
from .fomm import KeypointDetector, OcclusionAwareGenerator, TPSTransform, equivariance_losses
from .head_pose import (HeadMotionPredictor, HeadPoseConfig, PatchDiscriminator1d, l1_pose_loss,
                        lsgan_d_loss, lsgan_g_loss, ssim_pose_loss)
from .motion_net import MotionFieldGenerator, MotionNetConfig
from .objectives import (LossWeights, PerceptualExtractor, lambda_m_schedule, pyramid_perceptual_loss,
                         stage1_loss, stage2_loss)
from .pose_render import CameraModel, render_pose_sequence
from .tensor_io import read_frames_dir, read_pose_csv

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1

DEFAULTS = {
    "general": {"seed": "0", "image_size": "64", "num_kp": "10"},
    "optim": {"lr": "2e-4", "weight_decay": "2e-6"},
    "loss": {k: repr(v) for k, v in LossWeights().to_dict().items()},
    "perceptual": {"source": "random", "seed": "0", "weights": "", "scales": "1.0,0.5,0.25,0.125"},
    "fomm": {
        "steps": "2000", "batch_size": "4", "log_every": "10", "checkpoint_every": "500",
        "detector_block_expansion": "16", "detector_max_features": "128", "detector_num_blocks": "3",
        "generator_block_expansion": "16", "generator_max_features": "128", "num_down_blocks": "2",
        "num_bottleneck_blocks": "3", "dense_block_expansion": "16", "dense_max_features": "128",
        "dense_scale": "0.5", "sigma_affine": "0.05", "sigma_tps": "0.005", "points_tps": "5",
    },
    "motion": {
        "window_T": "64", "stage1_steps": "500", "stage2_steps": "500", "batch_size": "1",
        "block_expansion": "16", "max_features": "128", "num_blocks": "3", "audio_channels": "16",
        "lambda_m_decay_steps": "200", "stage2_frames": "4", "no_jacobian": "false",
        "log_every": "10", "checkpoint_every": "100",
    },
    "head": {
        "window_T": "256", "steps": "500", "batch_size": "4", "embed_dim": "256", "audio_dim": "256",
        "resnet_width": "64", "resnet_layers": "3,4,6,3", "pose_loss": "ssim", "no_set": "false",
        "gan_weight": "1.0", "pose_weight": "1.0", "log_every": "10", "checkpoint_every": "100",
    },
}


class TrainingError(RuntimeError):
    pass


class IncompatibleCheckpointError(RuntimeError):
    pass


# -- configuration --------------------------------------------------------------

class Config:
    """Sectioned key/value settings (INI text), with typed getters and a stable hash."""

    def __init__(self, sections: dict | None = None):
        self.sections = copy.deepcopy(DEFAULTS)
        for name, values in (sections or {}).items():
            self.sections.setdefault(name, {}).update({k: str(v) for k, v in values.items()})

    @classmethod
    def load(cls, path=None, overrides: dict | None = None) -> "Config":
        cfg = cls()
        if path:
            parser = configparser.ConfigParser()
            parser.optionxform = str
            if not parser.read(path):
                raise FileNotFoundError(f"config file not found: {path}")
            for section in parser.sections():
                cfg.sections.setdefault(section, {}).update(dict(parser[section]))
        for key, value in (overrides or {}).items():
            cfg.set(key, value)
        return cfg

    def set(self, dotted_key: str, value):
        section, key = dotted_key.split(".", 1)
        self.sections.setdefault(section, {})[key] = str(value).lower() if isinstance(value, bool) else str(value)

    def get(self, section, key, type_=str):
        raw = self.sections[section][key]
        if type_ is bool:
            return raw.strip().lower() in ("1", "true", "yes", "on")
        if type_ is tuple:
            return tuple(int(v) for v in raw.split(",") if v.strip())
        return type_(raw)

    def section(self, name) -> dict:
        return dict(self.sections[name])

    def dump(self, path):
        parser = configparser.ConfigParser()
        parser.optionxform = str
        parser.read_dict(self.sections)
        with open(path, "w") as f:
            parser.write(f)

    def hash(self, *section_names) -> str:
        names = section_names or tuple(sorted(self.sections))
        blob = json.dumps({n: self.sections[n] for n in names}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def loss_weights(self) -> LossWeights:
        return LossWeights(**{k: float(v) for k, v in self.sections["loss"].items()})

    def perceptual_scales(self):
        return tuple(float(s) for s in self.sections["perceptual"]["scales"].split(","))


# -- data -------------------------------------------------------------------------

@dataclass
class Clip:
    clip_id: str
    frames: np.ndarray  # (T, H, W, 3) float32
    audio: np.ndarray  # (T, 4, 41) float32
    poses: np.ndarray  # (T, 6) float32
    face_box: tuple | None = None

    def __len__(self):
        return len(self.frames)


def load_manifest(path) -> list[dict]:
    path = Path(path)
    data = json.loads(path.read_text())
    entries = data.get("entries", [])
    if not entries:
        raise TrainingError(f"{path}: manifest has no clips")
    out = []
    for entry in entries:
        resolved = dict(entry)
        for key in ("frames_dir", "audio_path", "pose_csv"):
            p = Path(entry[key])
            p = p if p.is_absolute() else path.parent / p
            if not p.exists():
                raise TrainingError(f"{path}: clip {entry.get('clip_id')}: missing {key} {p}")
            resolved[key] = p
        out.append(resolved)
    return out


def load_clip(entry: dict) -> Clip:
    frames = read_frames_dir(entry["frames_dir"])
    feats = audio_mod.extract_features(audio_mod.load_wav(entry["audio_path"])).frames
    poses = read_pose_csv(entry["pose_csv"])
    if not (len(frames) == len(feats) == len(poses)):
        raise TrainingError(f"clip {entry['clip_id']}: frame count {len(frames)}, audio frames "
                            f"{len(feats)} and pose rows {len(poses)} disagree")
    box = tuple(entry["face_box"]) if entry.get("face_box") else None
    return Clip(entry["clip_id"], frames, feats, poses, box)


def load_dataset(manifest_path) -> list[Clip]:
    return [load_clip(e) for e in load_manifest(manifest_path)]


def to_chw(frames) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(frames)).permute(0, 3, 1, 2).float()


def resize_square(images: torch.Tensor, size: int) -> torch.Tensor:
    if images.shape[-1] == size and images.shape[-2] == size:
        return images
    return F.interpolate(images, size=(size, size), mode="bilinear", align_corners=False,
                         antialias=True).clamp(0, 1)


def render_pose_maps(poses, size=64) -> np.ndarray:
    cam = CameraModel(image_size=(size, size), principal_point=(size / 2, size / 2), focal=float(size))
    return render_pose_sequence(poses, cam).astype(np.float32)


# -- checkpoints -----------------------------------------------------------------

def _sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def state_hash(module: torch.nn.Module) -> str:
    """Hash of every parameter and buffer, byte-exact."""
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()[:16]


def save_checkpoint(directory, kind: str, modules: dict, config: Config, meta: dict | None = None,
                    train_state: dict | None = None) -> Path:
    """Versioned checkpoint directory: weights.pt, config.ini, meta.json and optionally train_state.pt."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    torch.save({name: m.state_dict() for name, m in modules.items()}, buf)
    weights = buf.getvalue()
    (directory / "weights.pt").write_bytes(weights)
    config.dump(directory / "config.ini")
    info = {"format_version": CHECKPOINT_VERSION, "kind": kind, "config_hash": config.hash(),
            "weights_sha256": _sha256_bytes(weights),
            "module_hashes": {name: state_hash(m) for name, m in modules.items()}}
    info.update(meta or {})
    (directory / "meta.json").write_text(json.dumps(info, indent=2, sort_keys=True))
    if train_state is not None:
        torch.save(train_state, directory / "train_state.pt")
    return directory


def read_checkpoint(directory, kind: str | None = None):
    """-> (meta dict, Config, {name: state_dict}, train_state or None)."""
    directory = Path(directory)
    meta_path = directory / "meta.json"
    if not meta_path.exists():
        raise IncompatibleCheckpointError(f"{directory}: not a checkpoint directory")
    meta = json.loads(meta_path.read_text())
    if meta.get("format_version") != CHECKPOINT_VERSION:
        raise IncompatibleCheckpointError(f"{directory}: unsupported checkpoint version {meta.get('format_version')}")
    if kind is not None and meta.get("kind") != kind:
        raise IncompatibleCheckpointError(f"{directory}: expected a {kind} checkpoint, found {meta.get('kind')}")
    weights = (directory / "weights.pt").read_bytes()
    if _sha256_bytes(weights) != meta["weights_sha256"]:
        raise IncompatibleCheckpointError(f"{directory}: weights file does not match its recorded hash")
    states = torch.load(io.BytesIO(weights), map_location="cpu", weights_only=True)
    config = Config.load(directory / "config.ini")
    train_state = None
    if (directory / "train_state.pt").exists():
        train_state = torch.load(directory / "train_state.pt", map_location="cpu", weights_only=False)
    return meta, config, states, train_state


# -- model builders ----------------------------------------------------------------

def build_fomm(config: Config):
    s = config.section("fomm")
    num_kp = config.get("general", "num_kp", int)
    detector = KeypointDetector(num_kp=num_kp, block_expansion=int(s["detector_block_expansion"]),
                                max_features=int(s["detector_max_features"]),
                                num_blocks=int(s["detector_num_blocks"]))
    generator = OcclusionAwareGenerator(
        num_kp=num_kp, block_expansion=int(s["generator_block_expansion"]),
        max_features=int(s["generator_max_features"]), num_down_blocks=int(s["num_down_blocks"]),
        num_bottleneck_blocks=int(s["num_bottleneck_blocks"]),
        dense_motion_params={"block_expansion": int(s["dense_block_expansion"]),
                             "max_features": int(s["dense_max_features"]),
                             "scale_factor": float(s["dense_scale"])})
    return detector, generator


def motion_config(config: Config) -> MotionNetConfig:
    s = config.section("motion")
    return MotionNetConfig(num_kp=config.get("general", "num_kp", int), block_expansion=int(s["block_expansion"]),
                           max_features=int(s["max_features"]), num_blocks=int(s["num_blocks"]),
                           audio_channels=int(s["audio_channels"]),
                           no_jacobian=config.get("motion", "no_jacobian", bool))


def head_config(config: Config) -> HeadPoseConfig:
    s = config.section("head")
    return HeadPoseConfig(embed_dim=int(s["embed_dim"]), audio_dim=int(s["audio_dim"]),
                          resnet_width=int(s["resnet_width"]), resnet_layers=config.get("head", "resnet_layers", tuple),
                          no_set=config.get("head", "no_set", bool), pose_loss=s["pose_loss"],
                          gan_weight=float(s["gan_weight"]), pose_weight=float(s["pose_weight"]),
                          image_size=config.get("general", "image_size", int))


def build_extractor(config: Config) -> PerceptualExtractor:
    s = config.section("perceptual")
    if s["source"] == "vgg16":
        if not s["weights"]:
            raise TrainingError("perceptual.source=vgg16 needs perceptual.weights pointing at a local file")
        return PerceptualExtractor.from_vgg16(s["weights"])
    return PerceptualExtractor(seed=int(s["seed"]))


def fomm_model_hash(config: Config) -> str:
    return config.hash("general", "fomm")


def load_fomm(directory):
    meta, config, states, _ = read_checkpoint(directory, "fomm")
    detector, generator = build_fomm(config)
    detector.load_state_dict(states["detector"])
    generator.load_state_dict(states["generator"])
    return detector.eval(), generator.eval(), meta, config


def load_motion(directory, kinds=("motion_stage1", "motion_stage2")):
    meta, config, states, _ = read_checkpoint(directory)
    if meta["kind"] not in kinds:
        raise IncompatibleCheckpointError(f"{directory}: expected one of {kinds}, found {meta['kind']}")
    model = MotionFieldGenerator(motion_config(config))
    model.load_state_dict(states["motion"])
    return model.eval(), meta, config


def load_head(directory):
    meta, config, states, _ = read_checkpoint(directory, "head")
    model = HeadMotionPredictor(head_config(config))
    model.load_state_dict(states["head"])
    return model.eval(), meta, config


# -- logging + training helpers ------------------------------------------------------

class LossLog:
    """Long-format CSV log: step, wall_time, term, value; also kept in memory."""

    def __init__(self, path=None, append=False):
        self.path = Path(path) if path else None
        self.rows: list[tuple[int, float, str, float]] = []
        self.start = time.time()
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            if not (append and self.path.exists()):
                self.path.write_text("step,wall_time,term,value\n")

    def add(self, step, terms: dict):
        now = time.time() - self.start
        rows = [(step, now, name, float(v)) for name, v in terms.items()]
        self.rows.extend(rows)
        if self.path:
            with open(self.path, "a", newline="") as f:
                w = csv.writer(f)
                for r in rows:
                    w.writerow([r[0], f"{r[1]:.3f}", r[2], repr(r[3])])

    def series(self, term) -> np.ndarray:
        return np.array([r[3] for r in self.rows if r[2] == term])


def read_loss_log(path) -> dict:
    out: dict[str, list] = {}
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            out.setdefault(row["term"], []).append((int(row["step"]), float(row["value"])))
    return out


def _check_finite(step, terms: dict):
    for name, value in terms.items():
        if not torch.isfinite(torch.as_tensor(value)).all():
            raise TrainingError(f"non-finite loss at step {step}: term {name} = {float(value)}")


def _detach(terms: dict) -> dict:
    return {k: float(v.detach()) if torch.is_tensor(v) else float(v) for k, v in terms.items()}


def _make_optimizer(params, config: Config):
    return torch.optim.Adam(params, lr=config.get("optim", "lr", float),
                            weight_decay=config.get("optim", "weight_decay", float))


def _freeze(*modules):
    for m in modules:
        m.eval()
        for p in m.parameters():
            p.requires_grad_(False)


@dataclass
class TrainResult:
    checkpoint: Path
    log: LossLog
    extra: dict


def _resume_state(resume, kind):
    if not resume:
        return None, None
    meta, _, states, train_state = read_checkpoint(resume, kind)
    if train_state is None:
        raise IncompatibleCheckpointError(f"{resume}: checkpoint has no training state to resume from")
    return states, train_state


# -- N_D + N_I ------------------------------------------------------------------------

def train_fomm(manifest, config: Config, out_dir, steps: int | None = None, resume=None) -> TrainResult:
    """Reconstruction-driven training of detector + generator on frame pairs of the same clip."""
    clips = load_dataset(manifest)
    seed = config.get("general", "seed", int)
    torch.manual_seed(seed)
    size = config.get("general", "image_size", int)
    s = config.section("fomm")
    steps = int(s["steps"]) if steps is None else steps
    batch = int(s["batch_size"])
    w = config.loss_weights()
    scales = config.perceptual_scales()
    detector, generator = build_fomm(config)
    ext = build_extractor(config)
    opt = _make_optimizer(list(detector.parameters()) + list(generator.parameters()), config)
    gen = torch.Generator().manual_seed(seed)
    videos = [resize_square(to_chw(c.frames), size) for c in clips]
    start = 0
    states, train_state = _resume_state(resume, "fomm")
    if states:
        detector.load_state_dict(states["detector"])
        generator.load_state_dict(states["generator"])
        opt.load_state_dict(train_state["optimizer"])
        gen.set_state(train_state["rng"])
        torch.set_rng_state(train_state["torch_rng"])
        start = train_state["step"]
    out_dir = Path(out_dir)
    log_ = LossLog(out_dir / "log.csv", append=bool(resume))
    detector.train()
    generator.train()
    log_every = int(s["log_every"])

    def snapshot(step):
        return save_checkpoint(out_dir / "checkpoint", "fomm", {"detector": detector, "generator": generator},
                               config, {"step": step, "model_hash": fomm_model_hash(config)},
                               {"optimizer": opt.state_dict(), "rng": gen.get_state(),
                                "torch_rng": torch.get_rng_state(), "step": step})

    for step in range(start, steps):
        ci = torch.randint(len(videos), (batch,), generator=gen)
        src = torch.stack([videos[c][torch.randint(len(videos[c]), (1,), generator=gen)[0]] for c in ci.tolist()])
        drv = torch.stack([videos[c][torch.randint(len(videos[c]), (1,), generator=gen)[0]] for c in ci.tolist()])
        kp_s, kp_d = detector(src), detector(drv)
        out = generator(src, kp_driving=kp_d, kp_source=kp_s)
        rec = pyramid_perceptual_loss(out["prediction"], drv, ext, scales)
        transform = TPSTransform(batch, float(s["sigma_affine"]), float(s["sigma_tps"]), int(s["points_tps"]),
                                 generator=gen)
        kp_t = detector(transform.transform_frame(drv))
        eq_p, eq_j = equivariance_losses(kp_d, kp_t, transform)
        terms = {"reconstruction": w.lambda_rec * rec, "equivariance_p": w.lambda_eq_p * eq_p,
                 "equivariance_j": w.lambda_eq_j * eq_j}
        terms["total"] = sum(terms.values())
        _check_finite(step, terms)
        opt.zero_grad()
        terms["total"].backward()
        opt.step()
        if step % log_every == 0 or step == steps - 1:
            log_.add(step, _detach(terms))
        if (step + 1) % int(s["checkpoint_every"]) == 0 and step + 1 < steps:
            snapshot(step + 1)
    ckpt = snapshot(steps)
    return TrainResult(ckpt, log_, {})


@torch.no_grad()
def reconstruct_clip(detector, generator, frames: torch.Tensor, source_index=0) -> torch.Tensor:
    """Drive frame ``source_index`` with detector keypoints of every frame; (T,3,H,W) -> (T,3,H,W)."""
    detector.eval()
    generator.eval()
    src = frames[source_index:source_index + 1]
    kp_s = detector(src)
    outs = []
    for t in range(len(frames)):
        kp_d = detector(frames[t:t + 1])
        outs.append(generator(src, kp_driving=kp_d, kp_source=kp_s)["prediction"])
    return torch.cat(outs)


# -- N_M ------------------------------------------------------------------------------

@torch.no_grad()
def detector_targets(detector, frames: torch.Tensor, chunk=16) -> dict:
    detector.eval()
    outs = [detector(frames[i:i + chunk]) for i in range(0, len(frames), chunk)]
    return {k: torch.cat([o[k] for o in outs]) for k in ("heatmap", "value", "jacobian")}


def _window(length, window_T, gen):
    """Start index and frame indices; short clips are padded by repeating the last frame."""
    if length >= window_T:
        start = int(torch.randint(length - window_T + 1, (1,), generator=gen)[0])
        return start, torch.arange(start, start + window_T)
    idx = torch.arange(window_T).clamp(max=length - 1)
    return 0, idx


@dataclass
class _MotionData:
    frames: torch.Tensor  # (T, 3, S, S)
    pose_maps: torch.Tensor  # (T, 64, 64)
    audio: torch.Tensor  # (T, 4, 41)
    targets: dict
    face_box: tuple | None


def _prepare_motion_data(clips, detector, size):
    data = []
    for c in clips:
        frames = resize_square(to_chw(c.frames), size)
        data.append(_MotionData(frames, torch.from_numpy(render_pose_maps(c.poses)),
                                torch.from_numpy(c.audio), detector_targets(detector, frames), c.face_box))
    return data


def _motion_stats(clips):
    mean, std = audio_mod.feature_stats([c.audio for c in clips])
    return mean, std


def _motion_meta(config, fomm_meta, step, extra=None):
    meta = {"step": step, "fomm_hash": fomm_meta["model_hash"], "model_hash": config.hash("general", "motion")}
    meta.update(extra or {})
    return meta


def train_motion_stage1(manifest, fomm_ckpt, config: Config, out_dir, steps: int | None = None,
                        resume=None) -> TrainResult:
    """Distil detector keypoints (heatmaps, positions, Jacobians) into N_M."""
    clips = load_dataset(manifest)
    detector, _, fomm_meta, fomm_cfg = load_fomm(fomm_ckpt)
    if fomm_cfg.get("general", "num_kp", int) != config.get("general", "num_kp", int):
        raise IncompatibleCheckpointError("keypoint count of the detector checkpoint differs from the config")
    _freeze(detector)
    seed = config.get("general", "seed", int)
    torch.manual_seed(seed)
    s = config.section("motion")
    steps = int(s["stage1_steps"]) if steps is None else steps
    window_T, batch = int(s["window_T"]), int(s["batch_size"])
    decay = int(s["lambda_m_decay_steps"])
    w = config.loss_weights()
    model = MotionFieldGenerator(motion_config(config))
    model.set_audio_stats(*_motion_stats(clips))
    opt = _make_optimizer(model.parameters(), config)
    gen = torch.Generator().manual_seed(seed)
    data = _prepare_motion_data(clips, detector, config.get("general", "image_size", int))
    start = 0
    states, train_state = _resume_state(resume, "motion_stage1")
    if states:
        model.load_state_dict(states["motion"])
        opt.load_state_dict(train_state["optimizer"])
        gen.set_state(train_state["rng"])
        torch.set_rng_state(train_state["torch_rng"])
        start = train_state["step"]
    out_dir = Path(out_dir)
    log_ = LossLog(out_dir / "log.csv", append=bool(resume))
    model.train()

    def snapshot(step):
        return save_checkpoint(out_dir / "checkpoint", "motion_stage1", {"motion": model}, config,
                               _motion_meta(config, fomm_meta, step),
                               {"optimizer": opt.state_dict(), "rng": gen.get_state(),
                                "torch_rng": torch.get_rng_state(), "step": step})

    for step in range(start, steps):
        images, maps, auds, tgt = [], [], [], {"heatmap": [], "value": [], "jacobian": []}
        for _ in range(batch):
            d = data[int(torch.randint(len(data), (1,), generator=gen)[0])]
            start_i, idx = _window(len(d.frames), window_T, gen)
            images.append(d.frames[start_i])
            maps.append(d.pose_maps[idx])
            auds.append(d.audio[idx])
            for k in tgt:
                tgt[k].append(d.targets[k][idx])
        pred = model(torch.stack(images), torch.stack(maps), torch.stack(auds))
        target = {k: torch.stack(v) for k, v in tgt.items()}
        lam_m = lambda_m_schedule(step, decay, w.lambda_m)
        terms = stage1_loss(pred, target, w, lambda_m=lam_m)
        _check_finite(step, terms)
        opt.zero_grad()
        terms["total"].backward()
        opt.step()
        if step % int(s["log_every"]) == 0 or step == steps - 1:
            logged = _detach(terms)
            logged["kp_l1"] = float((pred["value"] - target["value"]).abs().mean().detach())
            logged["lambda_m"] = lam_m
            log_.add(step, logged)
        if (step + 1) % int(s["checkpoint_every"]) == 0 and step + 1 < steps:
            snapshot(step + 1)
    return TrainResult(snapshot(steps), log_, {})


def train_motion_stage2(manifest, fomm_ckpt, stage1_ckpt, config: Config, out_dir, steps: int | None = None,
                        resume=None) -> TrainResult:
    """Fine-tune N_M through the frozen generator: positions + pyramid perceptual + equivariance."""
    clips = load_dataset(manifest)
    detector, generator, fomm_meta, _ = load_fomm(fomm_ckpt)
    model, s1_meta, _ = load_motion(stage1_ckpt, kinds=("motion_stage1",))
    if s1_meta["fomm_hash"] != fomm_meta["model_hash"]:
        raise IncompatibleCheckpointError(
            f"stage-1 checkpoint was trained against detector {s1_meta['fomm_hash']}, got {fomm_meta['model_hash']}")
    _freeze(detector, generator)
    frozen_before = {"detector": state_hash(detector), "generator": state_hash(generator)}
    seed = config.get("general", "seed", int)
    torch.manual_seed(seed)
    s = config.section("motion")
    fs = config.section("fomm")
    steps = int(s["stage2_steps"]) if steps is None else steps
    window_T, batch, n_frames = int(s["window_T"]), int(s["batch_size"]), int(s["stage2_frames"])
    w = config.loss_weights()
    scales = config.perceptual_scales()
    ext = build_extractor(config)
    opt = _make_optimizer(model.parameters(), config)
    gen = torch.Generator().manual_seed(seed)
    data = _prepare_motion_data(clips, detector, config.get("general", "image_size", int))
    start = 0
    states, train_state = _resume_state(resume, "motion_stage2")
    if states:
        model.load_state_dict(states["motion"])
        opt.load_state_dict(train_state["optimizer"])
        gen.set_state(train_state["rng"])
        torch.set_rng_state(train_state["torch_rng"])
        start = train_state["step"]
    out_dir = Path(out_dir)
    log_ = LossLog(out_dir / "log.csv", append=bool(resume))
    model.train()

    def snapshot(step):
        return save_checkpoint(out_dir / "checkpoint", "motion_stage2", {"motion": model}, config,
                               _motion_meta(config, fomm_meta, step, {"stage1_hash": s1_meta["module_hashes"]["motion"]}),
                               {"optimizer": opt.state_dict(), "rng": gen.get_state(),
                                "torch_rng": torch.get_rng_state(), "step": step})

    for step in range(start, steps):
        images, maps, auds, values, gt_frames, picks = [], [], [], [], [], []
        for _ in range(batch):
            d = data[int(torch.randint(len(data), (1,), generator=gen)[0])]
            start_i, idx = _window(len(d.frames), window_T, gen)
            images.append(d.frames[start_i])
            maps.append(d.pose_maps[idx])
            auds.append(d.audio[idx])
            values.append(d.targets["value"][idx])
            pick = torch.randperm(window_T, generator=gen)[:n_frames]
            picks.append(pick)
            gt_frames.append(d.frames[idx[pick]])
        ref = torch.stack(images)
        pred = model(ref, torch.stack(maps), torch.stack(auds))
        b = len(images)
        sel = torch.stack(picks)  # (B, K)
        bi = torch.arange(b).unsqueeze(1).expand_as(sel)
        kp_drv = {"value": pred["value"][bi, sel].flatten(0, 1), "jacobian": pred["jacobian"][bi, sel].flatten(0, 1)}
        gt = torch.cat(gt_frames)
        src = ref.repeat_interleave(sel.shape[1], dim=0)
        with torch.no_grad():
            kp_src = detector(src)
        frames_out = generator(src, kp_driving=kp_drv, kp_source=kp_src)["prediction"]
        transform = TPSTransform(len(gt), float(fs["sigma_affine"]), float(fs["sigma_tps"]),
                                 int(fs["points_tps"]), generator=gen)
        with torch.no_grad():
            kp_t = detector(transform.transform_frame(gt))
        eq = equivariance_losses(kp_drv, kp_t, transform)
        terms = stage2_loss(pred["value"], torch.stack(values), frames_out, gt, eq, w, ext, scales)
        _check_finite(step, terms)
        opt.zero_grad()
        terms["total"].backward()
        opt.step()
        if step % int(s["log_every"]) == 0 or step == steps - 1:
            log_.add(step, _detach(terms))
        if (step + 1) % int(s["checkpoint_every"]) == 0 and step + 1 < steps:
            snapshot(step + 1)
    frozen_after = {"detector": state_hash(detector), "generator": state_hash(generator)}
    if frozen_after != frozen_before:
        raise TrainingError("frozen detector/generator weights changed during stage 2")
    return TrainResult(snapshot(steps), log_, {"frozen_hashes": frozen_after})


@torch.no_grad()
def generate_from_motion(model, detector, generator, frames_ref: torch.Tensor, pose_maps, audio):
    """Render every frame driven by N_M keypoints. frames_ref (1,3,S,S); pose_maps (T,64,64); audio (T,4,41)."""
    model.eval()
    pred = model(frames_ref, pose_maps.unsqueeze(0), audio.unsqueeze(0))
    kp_src = detector(frames_ref)
    outs = []
    for t in range(pose_maps.shape[0]):
        kp = {"value": pred["value"][:, t], "jacobian": pred["jacobian"][:, t]}
        outs.append(generator(frames_ref, kp_driving=kp, kp_source=kp_src)["prediction"])
    return torch.cat(outs), pred


def background_jitter(frames, face_box) -> float:
    """Mean |I_t - I_{t-1}| over pixels outside the face box; frames (T, 3, H, W) or (T, H, W, 3)."""
    frames = torch.as_tensor(frames)
    if frames.shape[-1] == 3:
        frames = frames.permute(0, 3, 1, 2)
    h, w = frames.shape[-2:]
    mask = torch.ones(h, w, dtype=torch.bool)
    if face_box is not None:
        x0, y0, x1, y1 = face_box
        mask[y0:y1, x0:x1] = False
    diff = (frames[1:] - frames[:-1]).abs()
    return float(diff[..., mask].mean())


# -- N_H -------------------------------------------------------------------------------

class HeadPoseTrainer:
    """Alternating LSGAN discriminator / generator updates for the head motion predictor."""

    def __init__(self, model: HeadMotionPredictor, discriminator: PatchDiscriminator1d, config: Config):
        self.model = model
        self.disc = discriminator
        self.opt_g = _make_optimizer(model.parameters(), config)
        self.opt_d = _make_optimizer(discriminator.parameters(), config)
        self.cfg = model.config

    def pose_loss(self, pred, gt):
        if self.cfg.pose_loss == "l1":
            return l1_pose_loss(pred, gt)
        if self.cfg.pose_loss == "ssim":
            return ssim_pose_loss(pred, gt, self.cfg.dynamic_range)
        raise ValueError(f"unknown pose loss {self.cfg.pose_loss!r}")

    def step(self, images, audio, poses) -> dict:
        """images (B,3,S,S); audio (B,T,4,41); poses (B,T,6) raw -> loss terms."""
        target = self.model.normalize_poses(poses)
        pred = self.model(images, audio)
        d_loss = lsgan_d_loss(self.disc(target), self.disc(pred.detach()))
        self.opt_d.zero_grad()
        d_loss.backward()
        self.opt_d.step()
        pose = self.pose_loss(pred, target)
        g_adv = lsgan_g_loss(self.disc(pred))
        total = self.cfg.pose_weight * pose + self.cfg.gan_weight * g_adv
        self.opt_g.zero_grad()
        total.backward()
        self.opt_g.step()
        return {"pose_" + self.cfg.pose_loss: pose, "gan_g": g_adv, "gan_d": d_loss, "total": total}


def train_head(manifest, config: Config, out_dir, steps: int | None = None, resume=None) -> TrainResult:
    clips = load_dataset(manifest)
    s = config.section("head")
    window_T, batch = int(s["window_T"]), int(s["batch_size"])
    usable = []
    for c in clips:
        if len(c) < window_T:
            log.warning("skipping clip %s: %d frames < window %d", c.clip_id, len(c), window_T)
        else:
            usable.append(c)
    if not usable:
        raise TrainingError(f"no clip is at least {window_T} frames long")
    seed = config.get("general", "seed", int)
    torch.manual_seed(seed)
    steps = int(s["steps"]) if steps is None else steps
    model = HeadMotionPredictor(head_config(config))
    poses_all = np.concatenate([c.poses for c in usable])
    amean, astd = audio_mod.feature_stats([c.audio for c in usable])
    model.set_stats(amean, astd, poses_all.mean(0), np.maximum(poses_all.std(0), 1e-3))
    disc = PatchDiscriminator1d(channels=model.config.disc_channels, kernel_size=model.config.disc_kernel,
                                strides=model.config.disc_strides)
    trainer = HeadPoseTrainer(model, disc, config)
    gen = torch.Generator().manual_seed(seed)
    size = model.config.image_size
    videos = [resize_square(to_chw(c.frames), size) for c in usable]
    start = 0
    states, train_state = _resume_state(resume, "head")
    if states:
        model.load_state_dict(states["head"])
        disc.load_state_dict(states["discriminator"])
        trainer.opt_g.load_state_dict(train_state["opt_g"])
        trainer.opt_d.load_state_dict(train_state["opt_d"])
        gen.set_state(train_state["rng"])
        torch.set_rng_state(train_state["torch_rng"])
        start = train_state["step"]
    out_dir = Path(out_dir)
    log_ = LossLog(out_dir / "log.csv", append=bool(resume))
    model.train()
    disc.train()

    def snapshot(step):
        return save_checkpoint(out_dir / "checkpoint", "head", {"head": model, "discriminator": disc}, config,
                               {"step": step, "model_hash": config.hash("general", "head")},
                               {"opt_g": trainer.opt_g.state_dict(), "opt_d": trainer.opt_d.state_dict(),
                                "rng": gen.get_state(), "torch_rng": torch.get_rng_state(), "step": step})

    for step in range(start, steps):
        imgs, auds, poses = [], [], []
        for _ in range(batch):
            ci = int(torch.randint(len(usable), (1,), generator=gen)[0])
            st, idx = _window(len(usable[ci]), window_T, gen)
            imgs.append(videos[ci][st])
            auds.append(torch.from_numpy(usable[ci].audio[idx.numpy()]))
            poses.append(torch.from_numpy(usable[ci].poses[idx.numpy()]))
        terms = trainer.step(torch.stack(imgs), torch.stack(auds), torch.stack(poses))
        _check_finite(step, terms)
        log_.add(step, _detach(terms))
        if (step + 1) % int(s["checkpoint_every"]) == 0 and step + 1 < steps:
            snapshot(step + 1)
    return TrainResult(snapshot(steps), log_, {})


train_head_predictor = train_head


def trailing_window_decrease(values, window: int) -> bool:
    """True if the mean of the last ``window`` values is below the mean of the first ``window``."""
    values = np.asarray(values, dtype=np.float64)
    if len(values) < 2 * window:
        raise ValueError(f"need at least {2 * window} values, got {len(values)}")
    return bool(values[-window:].mean() < values[:window].mean())
