"""Command-line entry point: ``talkhead <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np


def _add_config_flags(p):
    p.add_argument("--config", help="INI config file")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config value (repeatable)")
    p.add_argument("--seed", type=int, help="random seed (overrides general.seed)")


def _load_config(args, extra=None):
    from .training import Config

    overrides = {}
    for item in args.set:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise SystemExit(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key] = value
    if args.seed is not None:
        overrides["general.seed"] = args.seed
    overrides.update(extra or {})
    return Config.load(args.config, overrides)


def _audio_or_features(p):
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--audio", help="input WAV")
    g.add_argument("--features", help="acoustic feature tensor from extract-features")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="talkhead", description="Audio-driven talking-head generation")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="run the whole pipeline")
    p.add_argument("--image", required=True)
    p.add_argument("--audio", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--head-ckpt")
    p.add_argument("--motion-ckpt")
    p.add_argument("--fomm-ckpt")
    p.add_argument("--pose-source", choices=["model", "csv"], default="model")
    p.add_argument("--poses", help="pose CSV used with --pose-source csv")
    p.add_argument("--keypoint-source", choices=["model", "file"], default="model")
    p.add_argument("--keypoints", help="keypoint tensor used with --keypoint-source file")
    p.add_argument("--dump-intermediates", action="store_true")
    p.add_argument("--no-jacobian", action="store_true")
    p.add_argument("--relative-keypoints", action="store_true",
                   help="apply keypoint motion relative to the first frame onto the detected image keypoints")
    p.add_argument("--config", help="INI file; a [generate] section may name the checkpoints")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("extract-features", help="WAV -> (T, 4, 41) feature tensor")
    p.add_argument("--audio", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--csv", help="also write a readable CSV dump")

    p = sub.add_parser("predict-pose", help="reference image + audio -> pose CSV")
    p.add_argument("--image", required=True)
    _audio_or_features(p)
    p.add_argument("--head-ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("render-pose", help="pose CSV -> wireframe box tensor")
    p.add_argument("--poses", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--png-dir")

    p = sub.add_parser("predict-keypoints", help="image + box maps + audio -> keypoint tensor")
    p.add_argument("--image", required=True)
    p.add_argument("--pose-maps", required=True)
    _audio_or_features(p)
    p.add_argument("--motion-ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--no-jacobian", action="store_true")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("render-video", help="image + keypoints -> PNG frames")
    p.add_argument("--image", required=True)
    p.add_argument("--keypoints", required=True)
    p.add_argument("--fomm-ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--tensor", help="also write frames as a raw tensor file")
    p.add_argument("--relative-keypoints", action="store_true")
    p.add_argument("--seed", type=int, default=0)

    for name, help_ in (("train-fomm", "train detector + generator"), ("train-head", "train head motion predictor"),
                        ("train-motion1", "motion generator, distillation stage"),
                        ("train-motion2", "motion generator, fine-tuning stage")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--manifest", required=True)
        p.add_argument("--out", required=True, help="run directory")
        p.add_argument("--steps", type=int)
        p.add_argument("--resume", help="checkpoint directory to continue from")
        _add_config_flags(p)
        if name in ("train-motion1", "train-motion2"):
            p.add_argument("--fomm-ckpt", required=True)
            p.add_argument("--no-jacobian", action="store_true")
        if name == "train-motion2":
            p.add_argument("--stage1-ckpt", required=True)
        if name == "train-head":
            p.add_argument("--loss", choices=["ssim", "l1"])
            p.add_argument("--no-set", action="store_true")
            p.add_argument("--window", type=int, help="window length T")

    p = sub.add_parser("evaluate", help="compare generated and ground-truth frames")
    p.add_argument("--gen", required=True, help="directory of generated PNG frames")
    p.add_argument("--gt", required=True, help="directory of ground-truth PNG frames")
    p.add_argument("--out", help="JSON report path (default: stdout)")
    p.add_argument("--csv", help="per-frame CSV report path")
    p.add_argument("--no-fid", action="store_true")
    p.add_argument("--pred-poses")
    p.add_argument("--gt-poses")
    p.add_argument("--pred-keypoints")
    p.add_argument("--gt-keypoints")

    p = sub.add_parser("plot-headpose", help="1-D PCA trajectory plot of head motion")
    p.add_argument("--pred", required=True, action="append", help="predicted pose CSV (repeatable)")
    p.add_argument("--gt", required=True)
    p.add_argument("--labels", help="comma-separated labels for the --pred files")
    p.add_argument("--out", default="headpose.png")
    return parser


def _validate(parser, args):
    if args.command == "generate":
        if args.pose_source == "csv" and not args.poses:
            parser.error("--pose-source csv requires --poses")
        if args.poses and args.pose_source != "csv":
            parser.error("--poses is only valid with --pose-source csv")
        if args.keypoint_source == "file" and not args.keypoints:
            parser.error("--keypoint-source file requires --keypoints")
        if args.keypoints and args.keypoint_source != "file":
            parser.error("--keypoints is only valid with --keypoint-source file")
        if args.keypoint_source == "file" and args.pose_source == "csv":
            parser.error("--pose-source csv has no effect with --keypoint-source file")
    if args.command == "evaluate":
        if bool(args.pred_poses) != bool(args.gt_poses):
            parser.error("--pred-poses and --gt-poses go together")
        if bool(args.pred_keypoints) != bool(args.gt_keypoints):
            parser.error("--pred-keypoints and --gt-keypoints go together")


def _generate(args):
    from . import pipeline

    ckpts = {"head_ckpt": args.head_ckpt, "motion_ckpt": args.motion_ckpt, "fomm_ckpt": args.fomm_ckpt}
    if args.config:
        import configparser

        parser = configparser.ConfigParser()
        parser.read(args.config)
        if parser.has_section("generate"):
            for key in ckpts:
                ckpts[key] = ckpts[key] or parser["generate"].get(key)
    res = pipeline.generate(args.image, args.audio, args.out,
                            pose_csv=args.poses, keypoints_path=args.keypoints,
                            dump_intermediates=args.dump_intermediates, seed=args.seed,
                            no_jacobian=args.no_jacobian, relative=args.relative_keypoints, **ckpts)
    print(f"wrote {res['num_frames']} frames to {Path(args.out) / 'frames'}")


def _train(args):
    from . import training

    extra = {}
    if getattr(args, "no_jacobian", False):
        extra["motion.no_jacobian"] = True
    if args.command == "train-head":
        if args.loss:
            extra["head.pose_loss"] = args.loss
        if args.no_set:
            extra["head.no_set"] = True
        if args.window:
            extra["head.window_T"] = args.window
    config = _load_config(args, extra)
    if args.command == "train-fomm":
        res = training.train_fomm(args.manifest, config, args.out, args.steps, args.resume)
    elif args.command == "train-head":
        res = training.train_head(args.manifest, config, args.out, args.steps, args.resume)
    elif args.command == "train-motion1":
        res = training.train_motion_stage1(args.manifest, args.fomm_ckpt, config, args.out, args.steps, args.resume)
    else:
        res = training.train_motion_stage2(args.manifest, args.fomm_ckpt, args.stage1_ckpt, config, args.out,
                                           args.steps, args.resume)
    print(f"checkpoint: {res.checkpoint}")


def _evaluate(args):
    from . import metrics
    from .tensor_io import read_frames_dir, read_keypoints, read_pose_csv

    gen, gt = read_frames_dir(args.gen), read_frames_dir(args.gt)
    if len(gen) != len(gt):
        raise ValueError(f"{args.gen} has {len(gen)} frames but {args.gt} has {len(gt)}")
    report = metrics.evaluate_frames(gen, gt, with_fid=not args.no_fid)
    if args.pred_poses:
        report.he = metrics.pose_errors(read_pose_csv(args.pred_poses), read_pose_csv(args.gt_poses))
    if args.pred_keypoints:
        report.ke = metrics.pose_errors(read_keypoints(args.pred_keypoints)[0], read_keypoints(args.gt_keypoints)[0])
    if args.csv:
        report.to_csv(args.csv)
    if args.out:
        report.to_json(args.out)
    summary = {k: v for k, v in vars(report).items() if k != "per_frame"}
    print(json.dumps(summary, indent=2))


def _plot(args):
    from . import metrics
    from .tensor_io import read_pose_csv

    labels = args.labels.split(",") if args.labels else [Path(p).stem for p in args.pred]
    if len(labels) != len(args.pred):
        raise ValueError("one label per --pred file")
    gt = read_pose_csv(args.gt)
    preds = [read_pose_csv(p) for p in args.pred]
    for path, seq in zip(args.pred, preds):
        if len(seq) != len(gt):
            raise ValueError(f"{path} has {len(seq)} frames, ground truth has {len(gt)}")
    metrics.pca_trajectory_plot([gt] + preds, ["ground truth"] + labels, args.out)
    print(f"wrote {args.out}")


def run(args):
    from . import pipeline

    if args.command == "generate":
        _generate(args)
    elif args.command == "extract-features":
        frames = pipeline.extract_features_stage(args.audio, args.out)
        if args.csv:
            from .tensor_io import write_acoustic_csv

            write_acoustic_csv(args.csv, frames)
        print(f"{len(frames)} frames -> {args.out}")
    elif args.command == "predict-pose":
        pipeline.predict_pose_stage(args.image, args.head_ckpt, args.out, args.features, args.audio)
    elif args.command == "render-pose":
        pipeline.render_pose_stage(args.poses, args.out, args.png_dir)
    elif args.command == "predict-keypoints":
        pipeline.predict_keypoints_stage(args.image, args.pose_maps, args.motion_ckpt, args.out,
                                         args.features, args.audio, args.no_jacobian)
    elif args.command == "render-video":
        pipeline.render_video_stage(args.image, args.keypoints, args.fomm_ckpt, args.out, args.tensor,
                                    relative=args.relative_keypoints)
    elif args.command.startswith("train-"):
        _train(args)
    elif args.command == "evaluate":
        _evaluate(args)
    elif args.command == "plot-headpose":
        _plot(args)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _validate(parser, args)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if getattr(args, "seed", None) is not None:
        import torch

        torch.manual_seed(args.seed)
        np.random.seed(args.seed)
    from .pipeline import StageError

    try:
        run(args)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"error: [{args.command}] {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
