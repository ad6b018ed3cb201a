"""Command-line surface: phantom generation, baseline and network
segmentation, training, calibration, and evaluation.

Option precedence is defaults < config file (key=value lines) < flags.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace

import numpy as np

from . import calibration as cal
from .losses import dsc_metric
from .nn import MFFNet, NetworkConfig, load_checkpoint, save_checkpoint
from .phantom import (PhantomSpec, RigidPose, generate_phantom, read_pose,
                      rotation_angle_deg, rotation_from_euler_deg, spec_from_text,
                      spec_to_text, write_pose)
from .segment import EmptySegmentationError, sliding_window_infer, threshold_segment
from .train import train_network
from .volume import DEFAULT_WINDOW, read_mvol, write_mvol


def _load_config(path):
    kv = {}
    if path:
        with open(path) as f:
            for line in f:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                key, _, value = line.partition("=")
                kv[key.strip().replace("-", "_")] = value.strip()
    return kv


def _triple(text):
    parts = [float(v) for v in text.split(",")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected three comma-separated values, got {text!r}")
    return tuple(parts)


def _pair(text):
    parts = [float(v) for v in text.split(",")]
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"expected two comma-separated values, got {text!r}")
    return tuple(parts)


def _merge(args, config, name, cast=None):
    """Flag wins; otherwise config file; otherwise the argparse default."""
    flag = getattr(args, name, None)
    if flag is not None:
        return flag
    if name in config:
        return cast(config[name]) if cast else config[name]
    return None


def cmd_phantom(args) -> int:
    config = _load_config(args.config)
    spec = PhantomSpec()
    if args.spec_file:
        with open(args.spec_file) as f:
            spec = spec_from_text(f.read())
    overrides = {}
    for field, cast in [("major_radius", float), ("tube_radius", float),
                        ("arc_span_deg", float), ("half_separation", float),
                        ("canal_intensity", float), ("background_intensity", float),
                        ("shell_intensity", float), ("noise_amplitude", float),
                        ("seed", int)]:
        v = _merge(args, config, field, cast)
        if v is not None:
            overrides[field] = v
    def as_floats(v):
        # flag values arrive as raw "a,b,c" strings; config values may too
        if isinstance(v, str):
            return tuple(float(x) for x in v.split(","))
        return tuple(float(x) for x in v)

    for field in ("dims", "spacing"):
        v = _merge(args, config, field)
        if v is not None:
            v = as_floats(v)
            overrides[field] = tuple(int(x) for x in v) if field == "dims" else v
    euler = _merge(args, config, "skew_euler")
    translation = _merge(args, config, "skew_translation")
    euler = as_floats(euler) if euler is not None else None
    translation = as_floats(translation) if translation is not None else None
    if euler is not None or translation is not None:
        rot = rotation_from_euler_deg(*(euler or (0, 0, 0)))
        overrides["skew"] = RigidPose(rot, np.array(translation or (0.0, 0.0, 0.0)))
    try:
        spec = replace(spec, **overrides)
    except ValueError as exc:
        print(f"error: invalid phantom spec: {exc}", file=sys.stderr)
        return 2
    os.makedirs(args.output, exist_ok=True)
    vol, mask, pose = generate_phantom(spec)
    write_mvol(vol, os.path.join(args.output, "volume.mvol"))
    write_mvol(mask, os.path.join(args.output, "mask.mvol"))
    write_pose(pose, os.path.join(args.output, "pose.txt"))
    with open(os.path.join(args.output, "spec.txt"), "w") as f:
        f.write(spec_to_text(spec))
    print(f"phantom written to {args.output} "
          f"({mask.foreground_count()} foreground voxels)")
    return 0


def cmd_segment_threshold(args) -> int:
    vol = read_mvol(args.input)
    try:
        mask = threshold_segment(vol, args.band)
    except EmptySegmentationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    write_mvol(mask, args.output)
    print(f"mask written to {args.output} ({mask.foreground_count()} voxels)")
    return 0


def cmd_train(args) -> int:
    config = _load_config(args.config)
    vol = read_mvol(args.input)
    mask = read_mvol(args.mask)
    lambdas = _merge(args, config, "lambdas", lambda s: tuple(float(x) for x in s.split(",")))
    net_config = NetworkConfig()
    if lambdas:
        net_config.lambdas = tuple(lambdas)
    try:
        net, history = train_network(
            vol, mask,
            iterations=args.iterations,
            lr=args.lr,
            seed=args.seed,
            batch_size=args.batch_size,
            config=net_config,
            log_path=args.loss_log,
        )
    except Exception as exc:
        print(f"error: training aborted: {exc}", file=sys.stderr)
        return 1
    save_checkpoint(net, args.output)
    final = history[-1]["total"] if history else float("nan")
    print(f"checkpoint written to {args.output} "
          f"({len(history)} iterations, final loss {final:.4f})")
    return 0


def cmd_infer(args) -> int:
    if not os.path.exists(args.checkpoint):
        print(f"error: checkpoint {args.checkpoint} not found", file=sys.stderr)
        return 2
    vol = read_mvol(args.input)
    net = MFFNet(NetworkConfig(), seed=0)
    load_checkpoint(net, args.checkpoint)
    mask = sliding_window_infer(net, vol, stride=args.stride, threshold=args.threshold)
    if mask.foreground_count() == 0:
        print("warning: empty segmentation", file=sys.stderr)
    write_mvol(mask, args.output)
    print(f"mask written to {args.output} ({mask.foreground_count()} voxels)")
    return 0


def cmd_calibrate(args) -> int:
    vol = read_mvol(args.input)
    mask = read_mvol(args.mask)
    os.makedirs(args.output, exist_ok=True)
    cal_vol, cal_mask, report, pose = cal.calibrate(
        vol, mask, l0=args.l0, max_iter=args.max_iter, spacing=args.spacing)
    report_path = os.path.join(args.output, "report.json")
    with open(report_path, "w") as f:
        f.write(report.to_json() + "\n")
    if report.rank == "Failed" and cal_vol is None:
        print(f"error: calibration failed: {report.error}", file=sys.stderr)
        return 1
    write_mvol(cal_vol, os.path.join(args.output, "calibrated_volume.mvol"))
    write_mvol(cal_mask, os.path.join(args.output, "calibrated_mask.mvol"))
    write_pose(pose, os.path.join(args.output, "est_pose.txt"))
    print(f"calibration rank {report.rank}; report at {report_path}")
    return 0 if report.rank != "Failed" else 1


def cmd_evaluate(args) -> int:
    pred = read_mvol(args.pred)
    metrics = {}
    if args.truth:
        truth = read_mvol(args.truth)
        if pred.voxels.shape != truth.voxels.shape:
            print("error: prediction and ground-truth shapes differ", file=sys.stderr)
            return 2
        metrics["dsc"] = dsc_metric(pred, truth)
        if metrics["dsc"] == 0.0 and pred.foreground_count() == 0:
            print("warning: prediction is empty", file=sys.stderr)
        metrics["per_component_dsc"] = _per_component_dsc(pred, truth)
    rank, gap, mirror = cal.rank_result(pred)
    metrics["rank"] = rank
    metrics["slice_gap"] = gap
    metrics["mirror_dsc"] = mirror
    if args.pose_true and args.pose_est:
        true_pose = read_pose(args.pose_true)   # canonical -> world skew
        est_pose = read_pose(args.pose_est)     # world -> calibrated
        resid = est_pose.compose(true_pose)     # should be near identity
        metrics["rotation_error_deg"] = rotation_angle_deg(resid.rotation, np.eye(3))
        metrics["translation_error_mm"] = float(np.linalg.norm(resid.translation))
    text = json.dumps(_jsonable(metrics), indent=2)
    if args.output:
        with open(args.output, "w") as f:
            f.write(text + "\n")
    print(text)
    return 0


def _per_component_dsc(pred, truth):
    """Dice per ground-truth component (left/right), against the whole prediction."""
    try:
        left, right = cal.split_components(truth)
    except cal.InsufficientAnchorsError:
        return []
    out = []
    for pts in (left, right):
        idx = np.rint(truth.index(pts)).astype(int)
        comp = np.zeros_like(truth.voxels)
        comp[idx[:, 2], idx[:, 1], idx[:, 0]] = 1
        inter = int(np.count_nonzero(comp & (pred.voxels > 0)))
        na, nb = int(comp.sum()), int(pred.foreground_count())
        out.append(2.0 * inter / (na + nb) if na + nb else 1.0)
    return out


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tbcalib",
                                     description="Temporal-bone CT canal segmentation "
                                                 "and geometric calibration")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a synthetic canal phantom")
    p.add_argument("--output", required=True, help="output directory")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--spec-file", help="phantom spec file to start from")
    p.add_argument("--seed", type=int)
    p.add_argument("--major-radius", dest="major_radius", type=float)
    p.add_argument("--tube-radius", dest="tube_radius", type=float)
    p.add_argument("--arc-span", dest="arc_span_deg", type=float)
    p.add_argument("--separation", dest="half_separation", type=float)
    p.add_argument("--canal-intensity", dest="canal_intensity", type=float)
    p.add_argument("--background-intensity", dest="background_intensity", type=float)
    p.add_argument("--shell-intensity", dest="shell_intensity", type=float)
    p.add_argument("--noise", dest="noise_amplitude", type=float)
    p.add_argument("--dims", help="nx,ny,nz")
    p.add_argument("--spacing", help="sx,sy,sz in mm")
    p.add_argument("--skew-euler", dest="skew_euler", help="rx,ry,rz in degrees")
    p.add_argument("--skew-translation", dest="skew_translation", help="tx,ty,tz in mm")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("segment-threshold", help="intensity-band baseline segmentation")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--band", type=_pair, required=True, help="lo,hi intensity band")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config")
    p.set_defaults(func=cmd_segment_threshold)

    p = sub.add_parser("train", help="train the segmentation network")
    p.add_argument("--input", required=True, help="volume.mvol")
    p.add_argument("--mask", required=True, help="mask.mvol")
    p.add_argument("--output", required=True, help="checkpoint path")
    p.add_argument("--iterations", type=int, default=500)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=2)
    p.add_argument("--lambdas", help="deep-supervision weights, comma-separated")
    p.add_argument("--loss-log", dest="loss_log", help="CSV loss log path")
    p.add_argument("--config")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="sliding-window network inference")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--stride", type=int, default=24)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("calibrate", help="geometric calibration from a mask")
    p.add_argument("--input", required=True, help="volume.mvol")
    p.add_argument("--mask", required=True, help="mask.mvol")
    p.add_argument("--output", required=True, help="output directory")
    p.add_argument("--l0", type=float, default=cal.DEFAULT_L0_MM)
    p.add_argument("--max-iter", dest="max_iter", type=int, default=cal.DEFAULT_MAX_ITER)
    p.add_argument("--spacing", type=float, default=cal.DEFAULT_OUT_SPACING)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("evaluate", help="evaluate a predicted mask")
    p.add_argument("--pred", required=True, help="predicted mask.mvol")
    p.add_argument("--truth", help="ground-truth mask.mvol")
    p.add_argument("--pose-true", dest="pose_true", help="ground-truth pose file")
    p.add_argument("--pose-est", dest="pose_est", help="estimated pose file")
    p.add_argument("--output", help="metrics JSON path")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config")
    p.set_defaults(func=cmd_evaluate)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
