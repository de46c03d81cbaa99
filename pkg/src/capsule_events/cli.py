"""Command-line interface: ``capsule-events <subcommand> ...``.

Each subcommand writes its outputs and a ``manifest.json`` under ``--out``.
The worker count defaults to ``$CAPSULE_EVENTS_WORKERS`` (or 1); outputs do
not depend on it.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import yaml

from . import __version__
from .fusion import FusionWeights
from .heads import load_head_specs, spec_to_dict
from .pipeline import ARM_NAMES, CLI_ARMS, apply_arm, decode_arm, decode_streams, evaluate, format_report, gts_by_video, split_streams
from .runner import (
    ConfigError,
    DataCache,
    StageError,
    StageRunner,
    _save_weights,
    _write_json,
    ablate,
    load_config,
    load_features,
    run_pipeline,
    stage_calibrate,
    stage_fuse_weights,
    stage_synth,
    stage_train_heads,
    stage_tune,
    write_eval,
)
from .decode import DecodeConfig, arm_config
from .streams import ground_truth_events, load_events, load_ground_truth, save_events, save_streams
from .synth import SynthConfig
from .taxonomy import default_taxonomy_path, load_taxonomy
from .tuning import OBJECTIVES, TuneReport, smoothing_windows

logger = logging.getLogger("capsule_events")

WORKERS_ENV = "CAPSULE_EVENTS_WORKERS"


def default_workers() -> int:
    raw = os.environ.get(WORKERS_ENV)
    if not raw:
        return 1
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"{WORKERS_ENV}: expected an integer, got {raw!r}") from None


def _floats(text: str) -> list:
    try:
        vals = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("expected at least one value")
    return vals


def _taxonomy(path):
    return load_taxonomy(path or default_taxonomy_path())


def _videos(args, cache: DataCache):
    """Video ids selected by --split/--split-name, or None for all."""
    if not getattr(args, "split", None):
        return None
    split = cache.split(args.split)
    if args.split_name not in split:
        raise ConfigError(f"--split-name: {args.split_name!r} not in {args.split}")
    return list(split[args.split_name])


# ---------------------------------------------------------------------------
# subcommand handlers


def cmd_synth(args) -> int:
    raw = {}
    if args.config:
        with open(args.config) as fh:
            raw = yaml.safe_load(fh) or {}
        raw = raw.get("synth", raw)
    if args.seed is not None:
        raw["seed"] = args.seed
    cfg = SynthConfig.from_dict(raw)
    tax = Path(args.taxonomy) if args.taxonomy else default_taxonomy_path()
    space = load_taxonomy(tax)
    runner = StageRunner(args.out, force=True)
    runner.manifest.seed = cfg.seed
    runner.record_input("taxonomy", tax)
    runner.run(
        "synth", {"taxonomy": tax}, {"synth": cfg.to_dict(), "features": args.features},
        lambda: stage_synth(Path(args.out), space, cfg, args.features),
    )
    return 0


def cmd_train_heads(args) -> int:
    specs = load_head_specs(args.heads)
    features = load_features(args.features, args.video_id)
    num_classes = _taxonomy(args.taxonomy).num_classes
    gts = gts_by_video(load_ground_truth(args.labels, num_classes))
    cache = DataCache()
    train = _videos(args, cache) or sorted(v for v in features if v in gts)
    out = Path(args.out) / f"heads_b{args.backbone}.jsonl"
    runner = StageRunner(args.out, force=True)
    for name, p in (("features", args.features), ("labels", args.labels), ("heads", args.heads)):
        runner.record_input(name, p)

    def go():
        streams = stage_train_heads(features, gts, specs, train, args.backbone, args.workers)
        save_streams(streams, out)
        return {"streams": out}

    runner.run(
        "train-heads",
        {"features": Path(args.features), "labels": Path(args.labels), "heads": Path(args.heads)},
        {"specs": [spec_to_dict(s) for s in specs], "train": train, "backbone": args.backbone},
        go,
    )
    return 0


def _fit_inputs(args):
    cache = DataCache()
    space = _taxonomy(args.taxonomy)
    streams = cache.streams(args.streams)
    gts = cache.ground_truth(args.gt, space.num_classes)
    videos = _videos(args, cache) or sorted(gts)
    return space, streams, gts, videos


def cmd_fuse_weights(args) -> int:
    fusion = {
        "model_weighting": args.model_weighting,
        "backbone_weighting": args.backbone_weighting,
        "backbones": args.backbones,
    }
    runner = StageRunner(args.out, force=True)

    def go():
        _, streams, gts, videos = _fit_inputs(args)
        w = stage_fuse_weights(streams, gts, videos, fusion)
        return {"weights": _save_weights(w, Path(args.out) / "weights.json")}

    runner.run("fuse-weights", {"streams": Path(args.streams), "ground_truth": Path(args.gt)}, fusion, go)
    return 0


def _base_decode(path, arm: str) -> DecodeConfig:
    base = json.loads(Path(path).read_text()) if path else {}
    return arm_config(DecodeConfig.from_dict(base), decode_arm(arm))


def cmd_calibrate(args) -> int:
    runner = StageRunner(args.out, force=True)

    def go():
        space, streams, gts, videos = _fit_inputs(args)
        w = apply_arm(FusionWeights.load(args.weights), args.arm, args.backbone)
        windows = smoothing_windows(_base_decode(args.decode_config, args.arm), space)
        w, scores = stage_calibrate(streams, gts, videos, w, args.temperature_grid, args.objective, windows)
        logger.info("temperature %.3g", w.temperature)
        return {
            "weights": _save_weights(w, Path(args.out) / "weights.json"),
            "scores": _write_json(Path(args.out) / "temperature_scores.json", scores),
        }

    params = {
        "grid": args.temperature_grid,
        "objective": args.objective,
        "arm": args.arm,
        "backbone": args.backbone,
        "decode_config": args.decode_config,
    }
    runner.run("calibrate", {"streams": Path(args.streams), "ground_truth": Path(args.gt), "weights": Path(args.weights)}, params, go)
    return 0


def cmd_tune(args) -> int:
    base = {}
    if args.decode_config:
        base = json.loads(Path(args.decode_config).read_text())
    tuning = {"objective": args.objective, "delta0": args.delta0, "max_iters": args.max_iters, "base": base}
    if args.no_grid:
        tuning["decode_grid"] = {}
    runner = StageRunner(args.out, force=True)

    def go():
        space, streams, gts, videos = _fit_inputs(args)
        weights = apply_arm(FusionWeights.load(args.weights), args.arm, args.backbone)
        if args.temperature_grid:
            windows = smoothing_windows(_base_decode(args.decode_config, args.arm), space)
            weights, _ = stage_calibrate(streams, gts, videos, weights, args.temperature_grid, windows=windows)
        report = stage_tune(streams, gts, videos, weights, space, tuning, args.arm, args.workers)
        path = Path(args.out) / "tune_report.json"
        report.save(path)
        if args.temperature_grid:
            _save_weights(weights, Path(args.out) / "weights.json")
        return {"tune_report": path}

    params = dict(tuning, arm=args.arm, backbone=args.backbone, temperature_grid=args.temperature_grid)
    runner.run("tune", {"streams": Path(args.streams), "ground_truth": Path(args.gt), "weights": Path(args.weights)}, params, go)
    return 0


def cmd_decode(args) -> int:
    runner = StageRunner(args.out, force=True)

    def go():
        cache = DataCache()
        space = _taxonomy(args.taxonomy)
        streams = cache.streams(args.streams)
        videos = _videos(args, cache)
        if videos is not None:
            streams = split_streams(streams, videos)
        weights = apply_arm(FusionWeights.load(args.weights), args.arm, args.backbone)
        if args.tune_report:
            cfg = TuneReport.load(args.tune_report).decode_config()
        else:
            cfg = DecodeConfig.from_dict(json.loads(Path(args.decode_config).read_text()))
        cfg = arm_config(cfg, decode_arm(args.arm))
        path = Path(args.out) / "events.csv"
        save_events(decode_streams(streams, weights, cfg, space, args.workers), path)
        return {"events": path}

    inputs = {"streams": Path(args.streams), "weights": Path(args.weights)}
    inputs["config"] = Path(args.tune_report or args.decode_config)
    runner.run("decode", inputs, {"arm": args.arm, "backbone": args.backbone}, go)
    return 0


def cmd_eval(args) -> int:
    space = _taxonomy(args.taxonomy)
    cache = DataCache()
    videos = _videos(args, cache)
    if args.gt_events:
        gt_events = load_events(args.gt_events)
    else:
        gts = load_ground_truth(args.gt, space.num_classes)
        gt_events = [ev for g in gts for ev in ground_truth_events(g)]
    preds = load_events(args.pred)
    if videos is not None:
        keep = set(videos)
        preds = [ev for ev in preds if ev.video_id in keep]
        gt_events = [ev for ev in gt_events if ev.video_id in keep]
    report = evaluate(preds, gt_events, space, videos)
    if args.out:
        runner = StageRunner(args.out, force=True)
        gt_path = Path(args.gt_events or args.gt)
        runner.run("eval", {"events": Path(args.pred), "ground_truth": gt_path}, {"videos": videos}, lambda: write_eval(report, Path(args.out)))
    sys.stdout.write(format_report(report))
    return 0


def _config_overrides(args) -> dict:
    return {
        "seed": getattr(args, "seed", None),
        "tuning.objective": getattr(args, "objective", None),
        "decode.arm": getattr(args, "arm", None),
        "decode.split": getattr(args, "eval_split", None),
        "eval.split": getattr(args, "eval_split", None),
        "ablation.split": getattr(args, "eval_split", None) if args.command == "ablate" else None,
    }


def cmd_run(args) -> int:
    cfg = load_config(args.config, _config_overrides(args))
    outputs = run_pipeline(cfg, args.out, args.workers, args.force)
    with open(outputs["report_text"]) as fh:
        summary = [line for line in fh if line.startswith("temporal mAP")]
    sys.stdout.write("".join(summary))
    return 0


def cmd_ablate(args) -> int:
    cfg = load_config(args.config, _config_overrides(args))
    if args.arms:
        unknown = [a for a in args.arms if a not in ARM_NAMES]
        if unknown:
            raise ConfigError(f"--arms: unknown arm {unknown[0]!r}; choose from {ARM_NAMES}")
        cfg["ablation"]["arms"] = args.arms
    outputs = ablate(cfg, args.out, args.workers, args.force)
    sys.stdout.write(Path(outputs["ablation_text"]).read_text())
    return 0


# ---------------------------------------------------------------------------
# parser


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--workers", type=int, default=None, help=f"worker threads (default: ${WORKERS_ENV} or 1)")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    return p


def _add_taxonomy(p):
    p.add_argument("--taxonomy", help="taxonomy YAML (default: bundled 14-class taxonomy)")


def _add_split(p, default_name: str):
    p.add_argument("--split", help="split manifest JSON; restricts to the videos of --split-name")
    p.add_argument("--split-name", default=default_name, help=f"split entry to use (default: {default_name})")


def _add_arm(p):
    p.add_argument("--arm", choices=CLI_ARMS, default="full", help="ablation arm (default: full)")
    p.add_argument("--backbone", type=int, help="backbone id for --arm single-backbone")


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="capsule-events", description="Event detection on multi-label video probability streams.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("synth", parents=[common], help="write a seeded synthetic corpus")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help="corpus seed (overrides --config)")
    p.add_argument("--config", help="YAML with synth settings (top level or under 'synth')")
    p.add_argument("--features", action="store_true", help="also write per-backbone feature matrices")
    _add_taxonomy(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-heads", parents=[common], help="train lightweight heads on feature matrices")
    p.add_argument("--features", required=True, help=".npz (one array per video) or .npy (single video)")
    p.add_argument("--video-id", help="video id for a single .npy feature matrix")
    p.add_argument("--labels", required=True, help="ground-truth JSONL")
    p.add_argument("--heads", required=True, help="head spec JSON (list or {'heads': [...]})")
    p.add_argument("--backbone", type=int, default=0, help="backbone id stamped on the output streams")
    p.add_argument("--out", required=True, help="output directory")
    _add_split(p, "train")
    _add_taxonomy(p)
    p.set_defaults(func=cmd_train_heads)

    p = sub.add_parser("fuse-weights", parents=[common], help="fit model and backbone fusion weights on validation data")
    p.add_argument("--streams", required=True, help="head probability streams JSONL")
    p.add_argument("--gt", required=True, help="ground-truth JSONL")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--model-weighting", choices=("ap", "uniform"), default="ap")
    p.add_argument("--backbone-weighting", choices=("map", "uniform"), default="map")
    p.add_argument("--backbones", type=int, nargs="+", help="restrict fusion to these backbone ids")
    _add_split(p, "val")
    _add_taxonomy(p)
    p.set_defaults(func=cmd_fuse_weights)

    p = sub.add_parser("calibrate", parents=[common], help="select the temperature on validation data")
    p.add_argument("--streams", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--weights", required=True, help="weights JSON from fuse-weights")
    p.add_argument("--out", required=True)
    p.add_argument("--temperature-grid", type=_floats, default=[0.5, 0.75, 1.0, 1.5, 2.0, 3.0], help="comma-separated temperatures")
    p.add_argument("--objective", choices=("f1", "frame_map"), default="f1", help="selection objective (default: f1)")
    p.add_argument("--decode-config", help="JSON DecodeConfig whose smoothing windows the f1 objective applies")
    _add_arm(p)
    _add_split(p, "val")
    _add_taxonomy(p)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("tune", parents=[common], help="tune thresholds and decode parameters on validation data")
    p.add_argument("--streams", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--weights", required=True, help="calibrated weights JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--objective", choices=OBJECTIVES, default="mean", help="temporal mAP objective (default: mean of both)")
    p.add_argument("--max-iters", type=int, default=50, help="local search cycles (default: 50)")
    p.add_argument("--delta0", type=float, default=0.05, help="initial threshold step (default: 0.05)")
    p.add_argument("--temperature-grid", type=_floats, help="re-select the temperature on this grid first")
    p.add_argument("--decode-config", help="JSON DecodeConfig used as the starting point")
    p.add_argument("--no-grid", action="store_true", help="skip the decode-parameter grid search")
    _add_arm(p)
    _add_split(p, "val")
    _add_taxonomy(p)
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("decode", parents=[common], help="fuse, calibrate and decode streams into events")
    p.add_argument("--streams", required=True)
    p.add_argument("--weights", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--tune-report", help="TuneReport JSON from tune")
    src.add_argument("--decode-config", help="explicit DecodeConfig JSON")
    p.add_argument("--out", required=True)
    _add_arm(p)
    _add_split(p, "test")
    _add_taxonomy(p)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("eval", parents=[common], help="temporal mAP of predicted events")
    p.add_argument("--pred", required=True, help="predicted events CSV")
    gt = p.add_mutually_exclusive_group(required=True)
    gt.add_argument("--gt-events", help="ground-truth events CSV")
    gt.add_argument("--gt", help="frame ground-truth JSONL (converted to events)")
    p.add_argument("--out", help="directory for the JSON and text reports")
    _add_split(p, "test")
    _add_taxonomy(p)
    p.set_defaults(func=cmd_eval)

    for name, func, helptext in (
        ("run", cmd_run, "run every stage from one config file"),
        ("ablate", cmd_ablate, "fit and score all ablation arms"),
    ):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--config", help="pipeline YAML (default: built-in defaults)")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, help="overrides 'seed'")
        p.add_argument("--objective", choices=OBJECTIVES, help="overrides 'tuning.objective'")
        p.add_argument("--eval-split", choices=("val", "test"), help="split to score")
        p.add_argument("--force", action="store_true", help="rerun stages even when their digests match")
        if name == "run":
            p.add_argument("--arm", choices=CLI_ARMS, help="overrides 'decode.arm'")
        else:
            p.add_argument("--arms", nargs="+", help="subset of arms to run")
        p.set_defaults(func=func)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.workers is None:
            args.workers = default_workers()
        if args.workers < 1:
            raise ConfigError("--workers: must be >= 1")
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, KeyError) as exc:
        print(f"error in {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
