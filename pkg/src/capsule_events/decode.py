"""Anatomy-aware temporal event decoding.

Stages, applied per video in this order:

1. per-class centred moving average (window chosen by class kind),
2. region exclusivity + monotone transit order (constrained Viterbi by default),
3. landmark gating against the decoded region assignment,
4. per-class thresholds, then 1-D opening and closing,
5. region coverage repair so every frame carries exactly its assigned region,
6. per-label event extraction (or the tuple-based variant, for ablations).
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .fusion import LOGIT_EPS
from .streams import EventRecord, ProbStream, segments
from .taxonomy import LabelSpace

MONOTONIC_MODES = ("viterbi", "greedy")
EVENT_MODES = ("per-label", "tuple")


class DecodeError(ValueError):
    pass


@dataclass(frozen=True)
class DecodeConfig:
    windows: dict = field(default_factory=lambda: {"region": 31, "landmark": 5, "pathology": 5})
    window_overrides: dict = field(default_factory=dict)
    thresholds: Optional[tuple] = None  # per class; None means 0.5 everywhere
    open_len: dict = field(default_factory=lambda: {"region": 1, "landmark": 1, "pathology": 1})
    close_len: dict = field(default_factory=lambda: {"region": 1, "landmark": 1, "pathology": 1})
    min_region_run: int = 25
    monotonic_mode: str = "viterbi"
    smoothing: bool = True
    constraints: bool = True
    morphology: bool = True
    event_mode: str = "per-label"

    def __post_init__(self):
        for w in list(self.windows.values()) + list(self.window_overrides.values()):
            if w < 1 or w % 2 == 0:
                raise DecodeError(f"smoothing windows must be odd and >= 1, got {w}")
        for v in list(self.open_len.values()) + list(self.close_len.values()):
            if v < 1:
                raise DecodeError(f"morphology lengths must be >= 1, got {v}")
        if self.thresholds is not None:
            th = tuple(float(t) for t in self.thresholds)
            if any(not 0 < t < 1 for t in th):
                raise DecodeError("thresholds must lie in (0, 1)")
            object.__setattr__(self, "thresholds", th)
        if self.monotonic_mode not in MONOTONIC_MODES:
            raise DecodeError(f"monotonic_mode must be one of {MONOTONIC_MODES}")
        if self.event_mode not in EVENT_MODES:
            raise DecodeError(f"event_mode must be one of {EVENT_MODES}")
        if self.min_region_run < 1:
            raise DecodeError("min_region_run must be >= 1")

    def window(self, class_id: int, space: LabelSpace) -> int:
        if class_id in self.window_overrides:
            return self.window_overrides[class_id]
        return self.windows.get(space.kind(class_id), 1)

    def threshold_vector(self, num_classes: int) -> np.ndarray:
        if self.thresholds is None:
            return np.full(num_classes, 0.5)
        if len(self.thresholds) != num_classes:
            raise DecodeError(f"expected {num_classes} thresholds, got {len(self.thresholds)}")
        return np.asarray(self.thresholds)

    def with_thresholds(self, thresholds) -> "DecodeConfig":
        return replace(self, thresholds=tuple(float(t) for t in thresholds))

    def to_dict(self) -> dict:
        return {
            "windows": dict(self.windows),
            "window_overrides": {str(k): v for k, v in sorted(self.window_overrides.items())},
            "thresholds": None if self.thresholds is None else list(self.thresholds),
            "open_len": dict(self.open_len),
            "close_len": dict(self.close_len),
            "min_region_run": self.min_region_run,
            "monotonic_mode": self.monotonic_mode,
            "smoothing": self.smoothing,
            "constraints": self.constraints,
            "morphology": self.morphology,
            "event_mode": self.event_mode,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "DecodeConfig":
        raw = dict(raw)
        if "window_overrides" in raw:
            raw["window_overrides"] = {int(k): int(v) for k, v in raw["window_overrides"].items()}
        if raw.get("thresholds") is not None:
            raw["thresholds"] = tuple(raw["thresholds"])
        return cls(**raw)


ARMS = {
    "full": {},
    "per-label-only": {"smoothing": False, "constraints": False, "morphology": False},
    "tuple-based": {"event_mode": "tuple"},
}


def arm_config(cfg: DecodeConfig, arm: str) -> DecodeConfig:
    """Decode flags of an ablation arm; fusion-only arms decode like ``full``."""
    return replace(cfg, **ARMS.get(arm, {}))


# ---------------------------------------------------------------------------
# 1. smoothing


def moving_average(x: np.ndarray, window: int) -> np.ndarray:
    """Centred moving average along axis 0, mean over the clipped window at the edges."""
    if window < 1 or window % 2 == 0:
        raise DecodeError(f"window must be odd and >= 1, got {window}")
    x = np.asarray(x, dtype=np.float64)
    if window == 1 or x.shape[0] == 0:
        return x.copy()
    n = x.shape[0]
    half = window // 2
    csum = np.concatenate([np.zeros((1,) + x.shape[1:]), np.cumsum(x, axis=0)])
    idx = np.arange(n)
    lo = np.clip(idx - half, 0, n)
    hi = np.clip(idx + half + 1, 0, n)
    counts = (hi - lo).reshape((-1,) + (1,) * (x.ndim - 1))
    return (csum[hi] - csum[lo]) / counts


def smooth(stream: ProbStream, cfg: DecodeConfig, space: LabelSpace) -> ProbStream:
    probs = stream.probs
    out = np.empty_like(probs)
    by_window: dict[int, list[int]] = {}
    for c in range(probs.shape[1]):
        by_window.setdefault(cfg.window(c, space), []).append(c)
    for w, cols in sorted(by_window.items()):
        out[:, cols] = moving_average(probs[:, cols], w)
    return stream.with_probs(np.clip(out, 0.0, 1.0))


# ---------------------------------------------------------------------------
# 2. region constraints


def monotone_viterbi(region_probs: np.ndarray) -> np.ndarray:
    """Best non-decreasing rank path under summed log-probabilities.

    ``region_probs`` is (frames, R) with columns in transit order. A monotone
    path is R contiguous (possibly empty) blocks, so the recursion runs over
    regions: ``best[r][t]`` is the best score of frames ``[0, t)`` using ranks
    ``0..r``. Ties prefer later transitions, i.e. lower ranks. Returns the
    rank per frame.
    """
    lp = np.log(np.clip(region_probs, LOGIT_EPS, 1.0))
    n, R = lp.shape
    prefix = np.vstack([np.zeros((1, R)), np.cumsum(lp, axis=0)])  # (n + 1, R)
    best = [prefix[:, 0]]
    for r in range(1, R):
        gain = best[-1] - prefix[:, r]
        best.append(prefix[:, r] + np.maximum.accumulate(gain))
    path = np.zeros(n, dtype=np.int64)
    end = n
    for r in range(R - 1, 0, -1):
        gain = best[r - 1][: end + 1] - prefix[: end + 1, r]
        start = int(np.flatnonzero(gain == gain.max())[-1])
        path[start:end] = r
        end = start
    return path


def greedy_monotone(region_probs: np.ndarray, min_run: int) -> np.ndarray:
    """Per-frame argmax with short backward runs pushed forward.

    A run whose rank is below the running maximum and shorter than
    ``min_run`` is reassigned frame by frame to the most probable region not
    behind the running maximum. Longer backward runs are kept as they are.
    """
    n, R = region_probs.shape
    arg = np.argmax(region_probs, axis=1)
    out = arg.copy()
    running = -1
    for s, e in _runs(arg):
        rank = int(arg[s])
        if rank < running and e - s < min_run:
            for t in range(s, e):
                r = running + int(np.argmax(region_probs[t, running:]))
                out[t] = r
                running = max(running, r)
        else:
            running = max(running, rank)
    return out


def _runs(values: np.ndarray) -> list[tuple[int, int]]:
    if values.size == 0:
        return []
    cuts = np.flatnonzero(values[1:] != values[:-1]) + 1
    starts = np.concatenate(([0], cuts))
    ends = np.concatenate((cuts, [values.size]))
    return list(zip(starts.tolist(), ends.tolist()))


def enforce_region_constraints(
    stream: ProbStream, space: LabelSpace, cfg: DecodeConfig
) -> tuple[ProbStream, np.ndarray]:
    """Mask all but one region per frame, following the transit order.

    Returns the masked stream and the assigned region class id per frame.
    """
    order = list(space.region_order)
    region_probs = stream.probs[:, order]
    if cfg.monotonic_mode == "viterbi":
        ranks = monotone_viterbi(region_probs)
    else:
        ranks = greedy_monotone(region_probs, cfg.min_region_run)
    assignment = np.asarray(order)[ranks]
    return stream.with_probs(mask_regions(stream.probs, assignment, space)), assignment


def mask_regions(probs: np.ndarray, assignment: np.ndarray, space: LabelSpace) -> np.ndarray:
    """Zero every region probability except the assigned region's."""
    frames = np.arange(len(assignment))
    out = probs.copy()
    keep = out[frames, assignment]
    out[:, list(space.region_order)] = 0.0
    out[frames, assignment] = keep
    return out


# ---------------------------------------------------------------------------
# 3. landmark gating


def _dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    """True wherever some True lies within ``radius`` frames."""
    if radius <= 0:
        return mask.copy()
    n = mask.size
    csum = np.concatenate(([0], np.cumsum(mask)))
    idx = np.arange(n)
    lo = np.clip(idx - radius, 0, n)
    hi = np.clip(idx + radius + 1, 0, n)
    return (csum[hi] - csum[lo]) > 0


def landmark_support(assignment: np.ndarray, space: LabelSpace) -> dict:
    """Per gated landmark, the frames within tolerance of a valid region."""
    out = {}
    for lm, rule in sorted(space.landmark_rules.items()):
        valid = np.isin(assignment, sorted(rule.valid_regions))
        out[lm] = _dilate(valid, rule.tolerance_frames)
    return out


def gate_landmarks(stream: ProbStream, assignment: np.ndarray, space: LabelSpace) -> ProbStream:
    probs = stream.probs.copy()
    for lm, allowed in landmark_support(assignment, space).items():
        probs[~allowed, lm] = 0.0
    return stream.with_probs(probs)


# ---------------------------------------------------------------------------
# 4. thresholds and morphology


def opening(row: np.ndarray, length: int) -> np.ndarray:
    """Drop positive runs shorter than ``length``."""
    row = np.asarray(row, dtype=bool)
    out = row.copy()
    if length <= 1:
        return out
    for s, e in segments(row):
        if e - s < length:
            out[s:e] = False
    return out


def closing(row: np.ndarray, length: int) -> np.ndarray:
    """Fill zero gaps shorter than ``length`` that sit between two positive runs."""
    row = np.asarray(row, dtype=bool)
    out = row.copy()
    if length <= 1:
        return out
    runs = segments(row)
    for (_, e0), (s1, _) in zip(runs, runs[1:]):
        if s1 - e0 < length:
            out[e0:s1] = True
    return out


def binarize_and_refine(probs: np.ndarray, cfg: DecodeConfig, space: LabelSpace) -> np.ndarray:
    """Threshold each class, then opening and closing with per-kind lengths."""
    thr = cfg.threshold_vector(probs.shape[1])
    timeline = probs >= thr[None, :]
    if not cfg.morphology:
        return timeline
    for c in range(probs.shape[1]):
        kind = space.kind(c)
        o, k = cfg.open_len.get(kind, 1), cfg.close_len.get(kind, 1)
        if o > 1 or k > 1:
            timeline[:, c] = closing(opening(timeline[:, c], o), k)
    return timeline


# ---------------------------------------------------------------------------
# 5. coverage


def ensure_region_coverage(timeline: np.ndarray, assignment: np.ndarray, space: LabelSpace) -> np.ndarray:
    """Leave exactly the assigned region on at every frame.

    Frames with no region left get their assigned region back; frames where
    morphology switched on extra regions keep only the assigned one.
    """
    out = timeline.copy()
    order = list(space.region_order)
    frames = np.arange(out.shape[0])
    out[:, order] = False
    out[frames, assignment] = True
    return out


# ---------------------------------------------------------------------------
# 6. events


def _event_score(scores: np.ndarray, s: int, e: int) -> float:
    return float(min(1.0, max(0.0, scores[s:e].mean())))


def events_per_label(timeline: np.ndarray, scores: np.ndarray, video_id: str) -> list[EventRecord]:
    """One event per maximal positive run per class, sorted by (class, start)."""
    out = []
    for c in range(timeline.shape[1]):
        for s, e in segments(timeline[:, c]):
            out.append(EventRecord(video_id, c, s, e, _event_score(scores[:, c], s, e)))
    return out


def events_tuple_based(timeline: np.ndarray, scores: np.ndarray, video_id: str) -> list[EventRecord]:
    """Split the video wherever the active label set changes; one event per active label per piece."""
    n = timeline.shape[0]
    if n == 0:
        return []
    changes = np.flatnonzero(np.any(timeline[1:] != timeline[:-1], axis=1)) + 1
    bounds = np.concatenate(([0], changes, [n]))
    out = []
    for s, e in zip(bounds[:-1].tolist(), bounds[1:].tolist()):
        for c in np.flatnonzero(timeline[s]):
            out.append(EventRecord(video_id, int(c), s, e, _event_score(scores[:, c], s, e)))
    out.sort(key=lambda ev: (ev.class_id, ev.start_frame))
    return out


# ---------------------------------------------------------------------------
# composition


@dataclass
class Prepared:
    """Threshold-independent part of decoding for one video."""

    video_id: str
    scores: np.ndarray  # smoothed probabilities used for event scores
    probs: np.ndarray  # after region masking and landmark gating
    assignment: Optional[np.ndarray]


@dataclass
class DecodeResult:
    events: list
    timeline: np.ndarray
    assignment: Optional[np.ndarray]


def prepare(stream: ProbStream, space: LabelSpace, cfg: DecodeConfig, memo: Optional[dict] = None) -> Prepared:
    """Run the threshold-free stages.

    ``memo`` (one dict per stream) caches smoothing and region assignments
    across calls with different configurations.
    """
    if stream.num_classes != space.num_classes:
        raise DecodeError(
            f"{stream.video_id}: stream has {stream.num_classes} classes, taxonomy {space.num_classes}"
        )
    memo = {} if memo is None else memo
    if cfg.smoothing:
        scores = np.empty_like(stream.probs)
        for c in range(space.num_classes):
            w = cfg.window(c, space)
            key = ("smooth", w)
            if key not in memo:
                memo[key] = np.clip(moving_average(stream.probs, w), 0.0, 1.0)
            scores[:, c] = memo[key][:, c]
    else:
        scores = stream.probs
    assignment = None
    probs = scores
    if cfg.constraints:
        order = list(space.region_order)
        key = ("assign", cfg.smoothing, tuple(cfg.window(r, space) for r in order), cfg.monotonic_mode, cfg.min_region_run)
        if key not in memo:
            memo[key] = enforce_region_constraints(stream.with_probs(scores), space, cfg)[1]
        assignment = memo[key]
        probs = mask_regions(scores, assignment, space)
        probs = gate_landmarks(stream.with_probs(probs), assignment, space).probs
    return Prepared(stream.video_id, scores, probs, assignment)


def class_column(prep: Prepared, c: int, space: LabelSpace, cfg: DecodeConfig) -> np.ndarray:
    """Final binary row of one class; equal to column ``c`` of ``finish``'s timeline."""
    kind = space.kind(c)
    if prep.assignment is not None and kind == "region":
        return prep.assignment == c
    row = prep.probs[:, c] >= cfg.threshold_vector(space.num_classes)[c]
    if cfg.morphology:
        row = closing(opening(row, cfg.open_len.get(kind, 1)), cfg.close_len.get(kind, 1))
    return row


def class_events(prep: Prepared, c: int, space: LabelSpace, cfg: DecodeConfig) -> list[EventRecord]:
    scores = prep.scores[:, c]
    return [
        EventRecord(prep.video_id, c, s, e, _event_score(scores, s, e))
        for s, e in segments(class_column(prep, c, space, cfg))
    ]


def finish(prep: Prepared, space: LabelSpace, cfg: DecodeConfig) -> DecodeResult:
    timeline = binarize_and_refine(prep.probs, cfg, space)
    if prep.assignment is not None:
        timeline = ensure_region_coverage(timeline, prep.assignment, space)
    extract = events_tuple_based if cfg.event_mode == "tuple" else events_per_label
    return DecodeResult(extract(timeline, prep.scores, prep.video_id), timeline, prep.assignment)


def decode_video(stream: ProbStream, space: LabelSpace, cfg: DecodeConfig) -> DecodeResult:
    return finish(prepare(stream, space, cfg), space, cfg)


def decode_ated(stream: ProbStream, space: LabelSpace, cfg: DecodeConfig) -> list[EventRecord]:
    """Events of one fused, calibrated stream."""
    return decode_video(stream, space, cfg).events


def decode_many(streams: Sequence[ProbStream], space: LabelSpace, cfg: DecodeConfig, workers: int = 1) -> list[EventRecord]:
    """Decode several videos; output order is by video id regardless of ``workers``."""
    streams = sorted(streams, key=lambda s: s.video_id)
    results = parallel_map(lambda s: decode_ated(s, space, cfg), streams, workers)
    return [ev for evs in results for ev in evs]


def parallel_map(fn, items, workers: int = 1) -> list:
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
