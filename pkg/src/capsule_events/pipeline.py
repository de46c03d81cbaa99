"""Fit/decode/evaluate glue shared by the CLI stages and the ablation table."""
from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass, field, replace
from typing import Mapping, Optional, Sequence

from .decode import DecodeConfig, arm_config, decode_many
from .fusion import FusionWeights, fit_fusion_weights, fuse_video, uniform_model_weights
from .metrics import IOU_THRESHOLDS, temporal_map
from .streams import EventRecord, GroundTruth, ProbStream, group_by_video
from .taxonomy import LabelSpace
from .tuning import DEFAULT_DECODE_GRID, DEFAULT_TEMPERATURE_GRID, TuneReport, tune

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Arm:
    name: str
    backbones: Optional[tuple] = None  # None = all
    model_weighting: str = "ap"
    backbone_weighting: str = "map"
    decode: str = "full"
    backbone_label: str = "all backbones"
    fusion_label: str = "weighted model + backbone fusion"
    decode_label: str = "full decoding + per-label events"


ARMS = [
    Arm("single-backbone-0", (0,), backbone_label="backbone 0 (temporal)", fusion_label="single backbone"),
    Arm("single-backbone-1", (1,), backbone_label="backbone 1 (frame)", fusion_label="single backbone"),
    Arm("per-label-only", decode="per-label-only", decode_label="per-label events only"),
    Arm("tuple-based", decode="tuple-based", decode_label="full decoding + tuple-based events"),
    Arm("uniform-fusion", model_weighting="uniform", backbone_weighting="uniform", fusion_label="uniform model + backbone fusion"),
    Arm("weighted-backbone-uniform-model", model_weighting="uniform", fusion_label="weighted backbone / uniform model"),
    Arm("full"),
]
ARM_NAMES = [a.name for a in ARMS]


def get_arm(name: str) -> Arm:
    for a in ARMS:
        if a.name == name:
            return a
    raise KeyError(f"unknown arm {name!r}; choose from {ARM_NAMES}")


@dataclass
class TuningOptions:
    temperature_grid: tuple = DEFAULT_TEMPERATURE_GRID
    decode_grid: dict = field(default_factory=lambda: dict(DEFAULT_DECODE_GRID))
    objective: str = "mean"
    delta0: float = 0.05
    max_iters: int = 50
    temperature_objective: str = "f1"
    base: DecodeConfig = field(default_factory=DecodeConfig)


# Arms reachable from one fitted weights file (no refit of backbone weights needed).
CLI_ARMS = ("full", "per-label-only", "tuple-based", "uniform-fusion", "single-backbone")


def apply_arm(weights: FusionWeights, arm: str, backbone: Optional[int] = None) -> FusionWeights:
    """Weights as the given arm would use them; decode-only arms leave them unchanged."""
    if arm not in CLI_ARMS:
        raise KeyError(f"unknown arm {arm!r}; choose from {CLI_ARMS}")
    if arm == "uniform-fusion":
        num_classes = len(next(iter(next(iter(weights.alpha.values())).values())))
        alpha = uniform_model_weights({b: list(models) for b, models in weights.alpha.items()}, num_classes)
        return FusionWeights(alpha, {b: 1.0 / len(alpha) for b in sorted(alpha)}, weights.temperature)
    if arm == "single-backbone":
        if backbone is None or backbone not in weights.alpha:
            raise KeyError(f"single-backbone arm needs a backbone from {sorted(weights.alpha)}")
        return FusionWeights({backbone: weights.alpha[backbone]}, {backbone: 1.0}, weights.temperature)
    return weights


def decode_arm(arm: str) -> str:
    return arm if arm in ("per-label-only", "tuple-based") else "full"


def fuse_all(streams: Sequence[ProbStream], weights: FusionWeights, calibrated: bool = True) -> list[ProbStream]:
    """One fused stream per video, sorted by video id."""
    by_video = group_by_video(streams)
    return [fuse_video(by_video[v], weights, calibrated) for v in sorted(by_video)]


def fit_weights(arm: Arm, val_streams, gts: Mapping[str, GroundTruth]) -> FusionWeights:
    return fit_fusion_weights(val_streams, gts, arm.model_weighting, arm.backbone_weighting, arm.backbones)


def fit_arm(
    arm: Arm,
    val_streams: Sequence[ProbStream],
    gts: Mapping[str, GroundTruth],
    space: LabelSpace,
    options: Optional[TuningOptions] = None,
    workers: int = 1,
) -> tuple[FusionWeights, TuneReport]:
    options = options or TuningOptions()
    weights = fit_weights(arm, val_streams, gts)
    fused = fuse_all(val_streams, weights, calibrated=False)
    report = tune(
        fused,
        gts,
        space,
        base=arm_config(options.base, arm.decode),
        temperature_grid=options.temperature_grid,
        decode_grid=options.decode_grid,
        objective=options.objective,
        delta0=options.delta0,
        max_iters=options.max_iters,
        temperature_objective=options.temperature_objective,
        workers=workers,
    )
    weights = replace(weights, temperature=report.temperature)
    return weights, report


def decode_streams(
    streams: Sequence[ProbStream],
    weights: FusionWeights,
    cfg: DecodeConfig,
    space: LabelSpace,
    workers: int = 1,
) -> list[EventRecord]:
    return decode_many(fuse_all(streams, weights), space, cfg, workers)


def evaluate(preds: Sequence[EventRecord], gt_events: Sequence[EventRecord], space: LabelSpace, videos=None) -> dict:
    """Report with per-video, per-class and overall temporal mAP at both thresholds."""
    report = {"thresholds": {}}
    for thr in IOU_THRESHOLDS:
        res = temporal_map(preds, gt_events, thr, videos)
        report["thresholds"][f"{thr:g}"] = {
            "overall": res.overall,
            "per_video": {
                v: {
                    "map": r.map,
                    "per_class": {space.names[c]: ap for c, ap in sorted(r.per_class_ap.items())},
                }
                for v, r in sorted(res.per_video.items())
            },
            "excluded_videos": res.excluded,
        }
    return report


def format_report(report: dict) -> str:
    lines = []
    for thr, block in report["thresholds"].items():
        overall = block["overall"]
        lines.append(f"temporal mAP@{thr}: {'n/a' if overall is None else f'{overall:.4f}'}")
    for thr, block in report["thresholds"].items():
        lines.append(f"per video @{thr}:")
        for vid, r in block["per_video"].items():
            lines.append(f"  {vid}: {r['map']:.4f}")
            for name, ap in r["per_class"].items():
                lines.append(f"    {name:<20s} {ap:.4f}")
    return "\n".join(lines) + "\n"


def split_streams(streams: Sequence[ProbStream], videos: Sequence[str]) -> list[ProbStream]:
    keep = set(videos)
    return [s for s in streams if s.video_id in keep]


@dataclass
class AblationRow:
    arm: Arm
    map50: float
    map95: float


def run_ablation(
    streams: Sequence[ProbStream],
    gts: Mapping[str, GroundTruth],
    gt_events: Sequence[EventRecord],
    split: Mapping[str, Sequence[str]],
    space: LabelSpace,
    options: Optional[TuningOptions] = None,
    arms: Sequence[str] = tuple(ARM_NAMES),
    eval_split: str = "test",
    workers: int = 1,
) -> list[AblationRow]:
    """Fit every arm on the validation split and score it on ``eval_split``."""
    val = split_streams(streams, split["val"])
    target = split_streams(streams, split[eval_split])
    target_ids = set(split[eval_split])
    target_gt = [ev for ev in gt_events if ev.video_id in target_ids]
    rows = []
    for name in arms:
        arm = get_arm(name)
        weights, report = fit_arm(arm, val, gts, space, options, workers)
        preds = decode_streams(target, weights, report.decode_config(), space, workers)
        ev = evaluate(preds, target_gt, space, sorted(target_ids))
        rows.append(
            AblationRow(arm, ev["thresholds"]["0.5"]["overall"] or 0.0, ev["thresholds"]["0.95"]["overall"] or 0.0)
        )
        logger.info("arm %s: tmAP@0.5=%.4f tmAP@0.95=%.4f", name, rows[-1].map50, rows[-1].map95)
    return rows


ABLATION_HEADER = ["arm", "backbones", "fusion", "decoding", "tmAP@0.5", "tmAP@0.95"]


def ablation_records(rows: Sequence[AblationRow]) -> list[list[str]]:
    return [
        [r.arm.name, r.arm.backbone_label, r.arm.fusion_label, r.arm.decode_label, f"{r.map50:.4f}", f"{r.map95:.4f}"]
        for r in rows
    ]


def format_ablation(rows: Sequence[AblationRow]) -> str:
    recs = [ABLATION_HEADER] + ablation_records(rows)
    widths = [max(len(r[i]) for r in recs) for i in range(len(ABLATION_HEADER))]
    lines = []
    for k, rec in enumerate(recs):
        lines.append("  ".join(cell.ljust(w) for cell, w in zip(rec, widths)).rstrip())
        if k == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def gts_by_video(gts: Sequence[GroundTruth]) -> dict:
    return {g.video_id: g for g in gts}


def events_by_video(events: Sequence[EventRecord]) -> dict:
    out = defaultdict(list)
    for ev in events:
        out[ev.video_id].append(ev)
    return dict(out)
