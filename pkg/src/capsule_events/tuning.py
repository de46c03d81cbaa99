"""Validation-set selection of temperature, thresholds and decode parameters."""
from __future__ import annotations

import itertools
import json
import logging
from collections import defaultdict
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .decode import DecodeConfig, class_events, finish, moving_average, parallel_map, prepare
from .fusion import calibrate, calibrate_probs
from .metrics import average_video_maps, frame_map, temporal_ap, temporal_map
from .streams import EventRecord, GroundTruth, ProbStream, ground_truth_events
from .taxonomy import LabelSpace

logger = logging.getLogger(__name__)

OBJECTIVES = ("tmap50", "tmap95", "mean")
DEFAULT_TEMPERATURE_GRID = (0.5, 0.75, 1.0, 1.5, 2.0, 3.0)
DEFAULT_DECODE_GRID = {
    "window.region": [15, 31, 61],
    "window.landmark": [1, 5, 9],
    "window.pathology": [1, 5, 9],
    "open.pathology": [1, 3],
    "close.pathology": [1, 5],
}
THETA_MIN, THETA_MAX = 0.001, 0.999


class TuningError(ValueError):
    pass


@dataclass
class TuneReport:
    temperature: float
    thresholds: list
    decode: dict
    objective: str = "mean"
    initial_thresholds: list = field(default_factory=list)
    trace: list = field(default_factory=list)  # [(cycle, objective value)]

    def decode_config(self) -> DecodeConfig:
        return DecodeConfig.from_dict(self.decode).with_thresholds(self.thresholds)

    def to_dict(self) -> dict:
        return {
            "temperature": self.temperature,
            "thresholds": list(self.thresholds),
            "decode": self.decode,
            "objective": self.objective,
            "initial_thresholds": list(self.initial_thresholds),
            "trace": [[int(i), float(v)] for i, v in self.trace],
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "TuneReport":
        rep = cls(
            float(raw["temperature"]),
            [float(t) for t in raw["thresholds"]],
            dict(raw["decode"]),
            raw.get("objective", "mean"),
            [float(t) for t in raw.get("initial_thresholds", [])],
            [(int(i), float(v)) for i, v in raw.get("trace", [])],
        )
        if any(not 0 < t < 1 for t in rep.thresholds):
            raise TuningError("thresholds must lie in (0, 1)")
        return rep

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "TuneReport":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


# ---------------------------------------------------------------------------
# objectives


def objective_value(preds: Sequence[EventRecord], gts: Sequence[EventRecord], objective: str = "mean") -> float:
    if objective not in OBJECTIVES:
        raise TuningError(f"objective must be one of {OBJECTIVES}")
    vals = []
    if objective in ("tmap50", "mean"):
        vals.append(temporal_map(preds, gts, 0.5).overall or 0.0)
    if objective in ("tmap95", "mean"):
        vals.append(temporal_map(preds, gts, 0.95).overall or 0.0)
    return float(np.mean(vals))


def _stack(streams: Sequence[ProbStream], gts: Mapping[str, GroundTruth]):
    streams = sorted(streams, key=lambda s: s.video_id)
    probs = np.concatenate([s.probs for s in streams])
    labels = np.concatenate([gts[s.video_id].labels for s in streams])
    return probs, labels


def mean_f1(probs: np.ndarray, labels: np.ndarray, thresholds: np.ndarray) -> float:
    """Mean frame F1 over classes that have at least one positive."""
    pred = probs >= thresholds[None, :]
    pos = labels.astype(bool)
    keep = pos.any(axis=0)
    tp = (pred & pos).sum(axis=0)
    denom = pred.sum(axis=0) + pos.sum(axis=0)
    f1 = np.where(denom > 0, 2 * tp / np.maximum(denom, 1), 0.0)
    return float(f1[keep].mean()) if keep.any() else 0.0


# ---------------------------------------------------------------------------
# temperature


def smoothing_windows(cfg: DecodeConfig, space: LabelSpace) -> Optional[list]:
    """Per-class moving-average widths the decoder would apply, or None when smoothing is off."""
    if not cfg.smoothing:
        return None
    return [cfg.window(c, space) for c in range(space.num_classes)]


def _smoothed(probs: np.ndarray, windows: Optional[Sequence[int]]) -> np.ndarray:
    if windows is None:
        return probs
    out = np.empty_like(probs)
    for c, w in enumerate(windows):
        out[:, c] = moving_average(probs[:, c], int(w))
    return out


def grid_search_temperature(
    fused: Sequence[ProbStream],
    gts: Mapping[str, GroundTruth],
    grid: Sequence[float] = DEFAULT_TEMPERATURE_GRID,
    thresholds: Optional[np.ndarray] = None,
    objective: str = "f1",
    windows: Optional[Sequence[int]] = None,
) -> tuple[float, list]:
    """Pick the temperature with the best validation objective (smallest on ties).

    ``objective="f1"`` scores mean frame F1 at ``thresholds`` (0.5 by
    default) after smoothing each video with the per-class ``windows``.
    Without smoothing, F1 at 0.5 cannot depend on T, since calibration keeps
    every value on its side of 0.5. ``"frame_map"`` scores frame mAP, which
    ignores temperature. Returns the chosen T and the list of (T, score).
    """
    if not grid:
        raise TuningError("temperature grid is empty")
    if any(t <= 0 for t in grid):
        raise TuningError("temperatures must be positive")
    fused = sorted(fused, key=lambda s: s.video_id)
    labels = np.concatenate([gts[s.video_id].labels for s in fused])
    num_classes = labels.shape[1]
    thr = np.full(num_classes, 0.5) if thresholds is None else np.asarray(thresholds)
    if windows is not None and len(windows) != num_classes:
        raise TuningError(f"expected {num_classes} smoothing windows, got {len(windows)}")
    scores = []
    best_t, best = None, -np.inf
    for t in sorted(grid):
        if objective == "f1":
            cal = np.concatenate([_smoothed(calibrate_probs(s.probs, t), windows) for s in fused])
            val = mean_f1(cal, labels, thr)
        elif objective == "frame_map":
            cal = np.concatenate([calibrate_probs(s.probs, t) for s in fused])
            val = frame_map([ProbStream("all", "fused", cal)], [GroundTruth("all", labels)]).map or 0.0
        else:
            raise TuningError(f"unknown temperature objective {objective!r}")
        scores.append((float(t), float(val)))
        if val > best:
            best_t, best = float(t), val
    return best_t, scores


# ---------------------------------------------------------------------------
# thresholds


def best_f1_threshold(scores: np.ndarray, labels: np.ndarray) -> Optional[float]:
    """Observed score maximising F1 of ``scores >= theta``; larger theta on ties."""
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    if n_pos == 0:
        return None
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    tp = np.cumsum(labels[order])
    # last index of each distinct score value: all frames >= that value are predicted
    last = np.flatnonzero(np.concatenate((s[1:] != s[:-1], [True])))
    npred = last + 1
    f1 = 2 * tp[last] / (npred + n_pos)
    best = int(np.argmax(f1))  # first max = largest threshold
    return float(s[last[best]])


def init_thresholds_f1(streams: Sequence[ProbStream], gts: Mapping[str, GroundTruth], num_classes: int) -> np.ndarray:
    probs, labels = _stack(streams, gts)
    out = np.full(num_classes, 0.5)
    for c in range(num_classes):
        th = best_f1_threshold(probs[:, c], labels[:, c])
        if th is None:
            logger.warning("class %d has no positive validation frames; threshold stays 0.5", c)
            continue
        out[c] = min(max(th, THETA_MIN), THETA_MAX)
    return out


def local_search_thresholds(
    theta0: Sequence[float],
    evaluate: Callable[[np.ndarray], float],
    classes: Optional[Sequence[int]] = None,
    delta0: float = 0.05,
    min_delta: float = 0.005,
    max_iters: int = 50,
) -> tuple[np.ndarray, list]:
    """Coordinate-wise hill climbing with a halving step.

    Each cycle visits ``classes`` in order and probes ``theta_c - delta`` and
    ``theta_c + delta``; a probe is kept only if it strictly improves the
    objective. A cycle without improvement halves ``delta``; the search stops
    once ``delta < min_delta`` or after ``max_iters`` cycles. The trace holds
    the starting value and every accepted improvement.
    """
    theta = np.asarray(theta0, dtype=np.float64).copy()
    if classes is None:
        classes = range(theta.size)
    best = evaluate(theta)
    trace = [(0, best)]
    delta = delta0
    for cycle in range(1, max_iters + 1):
        if delta < min_delta:
            break
        improved = False
        for c in classes:
            cand_best, cand_val = None, best
            for step in (-delta, delta):
                probe = round(min(max(theta[c] + step, THETA_MIN), THETA_MAX), 6)
                if probe == theta[c]:
                    continue
                trial = theta.copy()
                trial[c] = probe
                val = evaluate(trial)
                if val > cand_val:
                    cand_best, cand_val = probe, val
            if cand_best is not None:
                theta[c] = cand_best
                best = cand_val
                trace.append((cycle, best))
                improved = True
        if not improved:
            delta /= 2
    return theta, trace


# ---------------------------------------------------------------------------
# decode parameters


def _apply_params(cfg: DecodeConfig, params: Mapping) -> DecodeConfig:
    windows, opens, closes = dict(cfg.windows), dict(cfg.open_len), dict(cfg.close_len)
    target = {"window": windows, "open": opens, "close": closes}
    other = {}
    for key, val in params.items():
        group, _, kind = key.partition(".")
        if group in target and kind:
            target[group][kind] = int(val)
        else:
            other[key] = val
    return replace(cfg, windows=windows, open_len=opens, close_len=closes, **other)


def _grid_order(keys: Sequence[str], combo: Sequence) -> tuple:
    windows = tuple(v for k, v in zip(keys, combo) if k.startswith("window."))
    morph = tuple(v for k, v in zip(keys, combo) if k.startswith(("open.", "close.")))
    rest = tuple(str(v) for k, v in zip(keys, combo) if not k.startswith(("window.", "open.", "close.")))
    return (sum(windows), windows, sum(morph), morph, rest)


class ValidationSet:
    """Validation streams and GT events with cached decoding.

    Threshold-free stages are cached per configuration. In per-label mode a
    class's events depend only on its own threshold, so per-(video, class)
    APs are cached too and a threshold probe only recomputes one class.
    """

    def __init__(self, streams: Sequence[ProbStream], gts: Mapping[str, GroundTruth], space: LabelSpace, workers: int = 1):
        self.streams = sorted(streams, key=lambda s: s.video_id)
        self.space = space
        self.workers = workers
        self.gt_events = [ev for s in self.streams for ev in ground_truth_events(gts[s.video_id])]
        self._gt_groups = defaultdict(list)
        for ev in self.gt_events:
            self._gt_groups[(ev.video_id, ev.class_id)].append(ev)
        self._memos = [{} for _ in self.streams]
        self._prepared = {}
        self._aps = {}

    @staticmethod
    def _key(cfg: DecodeConfig) -> str:
        return json.dumps({k: v for k, v in cfg.to_dict().items() if k != "thresholds"}, sort_keys=True)

    def prepared(self, cfg: DecodeConfig):
        key = self._key(cfg)
        if key not in self._prepared:
            jobs = list(zip(self.streams, self._memos))
            self._prepared[key] = parallel_map(lambda job: prepare(job[0], self.space, cfg, job[1]), jobs, self.workers)
        return self._prepared[key]

    def events(self, cfg: DecodeConfig) -> list:
        results = parallel_map(lambda p: finish(p, self.space, cfg).events, self.prepared(cfg), self.workers)
        return [ev for evs in results for ev in evs]

    def score(self, cfg: DecodeConfig, objective: str = "mean") -> float:
        if cfg.event_mode != "per-label":
            return objective_value(self.events(cfg), self.gt_events, objective)
        if objective not in OBJECTIVES:
            raise TuningError(f"objective must be one of {OBJECTIVES}")
        key = self._key(cfg)
        theta = cfg.threshold_vector(self.space.num_classes)
        per_video = {0.5: [], 0.95: []}
        for prep in self.prepared(cfg):
            classes = sorted(c for v, c in self._gt_groups if v == prep.video_id)
            if not classes:
                continue
            aps = []
            for c in classes:
                fixed = prep.assignment is not None and self.space.kind(c) == "region"
                ck = (key, prep.video_id, c, None if fixed else float(theta[c]))
                if ck not in self._aps:
                    preds = class_events(prep, c, self.space, cfg)
                    gts = self._gt_groups[(prep.video_id, c)]
                    self._aps[ck] = (temporal_ap(preds, gts, 0.5), temporal_ap(preds, gts, 0.95))
                aps.append(self._aps[ck])
            per_video[0.5].append(float(np.mean([a for a, _ in aps])))
            per_video[0.95].append(float(np.mean([b for _, b in aps])))
        vals = []
        if objective in ("tmap50", "mean"):
            vals.append(average_video_maps(per_video[0.5]) or 0.0)
        if objective in ("tmap95", "mean"):
            vals.append(average_video_maps(per_video[0.95]) or 0.0)
        return float(np.mean(vals))


def tune_decode_params(param_grid: Mapping, val: ValidationSet, base: DecodeConfig, objective: str = "mean") -> tuple[DecodeConfig, float]:
    """Exhaustive grid search; ties go to smaller windows, then smaller morphology."""
    keys = sorted(param_grid)
    combos = list(itertools.product(*(param_grid[k] for k in keys)))
    if not combos or not keys:
        raise TuningError("decode parameter grid is empty")
    combos.sort(key=lambda c: _grid_order(keys, c))
    best_cfg, best = None, -np.inf
    for combo in combos:
        cfg = _apply_params(base, dict(zip(keys, combo)))
        val_score = val.score(cfg, objective)
        if val_score > best:
            best_cfg, best = cfg, val_score
    return best_cfg, best


def tunable_classes(space: LabelSpace, cfg: DecodeConfig) -> list[int]:
    """Classes whose threshold can change the decoded events."""
    if cfg.constraints:
        return [c for c in range(space.num_classes) if space.kind(c) != "region"]
    return list(range(space.num_classes))


def tune_calibrated(
    calibrated_val: Sequence[ProbStream],
    gts: Mapping[str, GroundTruth],
    space: LabelSpace,
    temperature: float = 1.0,
    base: Optional[DecodeConfig] = None,
    decode_grid: Optional[Mapping] = None,
    objective: str = "mean",
    delta0: float = 0.05,
    max_iters: int = 50,
    workers: int = 1,
) -> TuneReport:
    """F1-initialised thresholds, decode-parameter grid, then threshold refinement.

    ``calibrated_val`` must already be calibrated at ``temperature``, which is
    only recorded in the report.
    """
    base = base or DecodeConfig()
    theta0 = init_thresholds_f1(calibrated_val, gts, space.num_classes)
    val = ValidationSet(calibrated_val, gts, space, workers)
    cfg = base.with_thresholds(theta0)
    grid = DEFAULT_DECODE_GRID if decode_grid is None else decode_grid
    if grid:
        cfg, _ = tune_decode_params(grid, val, cfg, objective)
    theta, trace = local_search_thresholds(
        theta0,
        lambda th: val.score(cfg.with_thresholds(th), objective),
        classes=tunable_classes(space, cfg),
        delta0=delta0,
        max_iters=max_iters,
    )
    decode = cfg.to_dict()
    decode.pop("thresholds")
    return TuneReport(float(temperature), [float(t) for t in theta], decode, objective, [float(t) for t in theta0], trace)


def tune(
    fused_val: Sequence[ProbStream],
    gts: Mapping[str, GroundTruth],
    space: LabelSpace,
    base: Optional[DecodeConfig] = None,
    temperature_grid: Sequence[float] = DEFAULT_TEMPERATURE_GRID,
    decode_grid: Optional[Mapping] = None,
    objective: str = "mean",
    delta0: float = 0.05,
    max_iters: int = 50,
    temperature_objective: str = "f1",
    workers: int = 1,
) -> TuneReport:
    """Temperature search on uncalibrated fused streams followed by :func:`tune_calibrated`."""
    base = base or DecodeConfig()
    temperature, _ = grid_search_temperature(
        fused_val, gts, temperature_grid, objective=temperature_objective, windows=smoothing_windows(base, space)
    )
    calibrated = [calibrate(s, temperature) for s in fused_val]
    return tune_calibrated(
        calibrated, gts, space, temperature, base, decode_grid, objective, delta0, max_iters, workers
    )
