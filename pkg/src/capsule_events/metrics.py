"""Frame-level AP and event-level temporal mAP.

Matching follows the usual detection convention: predictions are visited by
descending score and each claims the unmatched ground-truth interval of the
same video with the highest temporal IoU, provided that IoU reaches the
threshold. AP uses all-point interpolation over the precision envelope.
"""
from __future__ import annotations

import itertools
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .streams import EventRecord

logger = logging.getLogger(__name__)

IOU_THRESHOLDS = (0.5, 0.95)


@dataclass
class APResult:
    per_class_ap: dict = field(default_factory=dict)  # class_id -> AP or None

    @property
    def map(self) -> Optional[float]:
        vals = [v for _, v in sorted(self.per_class_ap.items()) if v is not None]
        return float(np.mean(vals)) if vals else None


def interpolated_ap(tp: np.ndarray, num_positives: int, interpolate: bool = True) -> float:
    """AP from a ranked hit sequence.

    With ``interpolate`` the precision at each recall step is replaced by the
    best precision at that or any higher recall (the envelope); without it the
    raw precision at each hit is averaged.
    """
    tp = np.asarray(tp, dtype=np.float64)
    if num_positives <= 0:
        raise ValueError("AP is undefined without positives")
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    precision = ctp / np.arange(1, tp.size + 1)
    if interpolate:
        precision = np.maximum.accumulate(precision[::-1])[::-1]
    return float(np.sum(precision * tp) / num_positives)


def frame_ap(scores: Sequence[float], labels: Sequence[int], interpolate: bool = True) -> Optional[float]:
    """Average precision of a frame scoring; ``None`` when there are no positives.

    Ties keep input order (stable sort).
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise ValueError(f"length mismatch: {scores.shape} vs {labels.shape}")
    n_pos = int(np.count_nonzero(labels))
    if n_pos == 0:
        return None
    order = np.argsort(-scores, kind="stable")
    return interpolated_ap(labels[order] != 0, n_pos, interpolate)


def frame_map(streams, gts, num_classes: Optional[int] = None) -> APResult:
    """Per-class AP over all frames of all videos concatenated.

    ``streams`` and ``gts`` are aligned sequences (or dicts keyed by video id)
    of ``ProbStream`` and ``GroundTruth``.
    """
    if isinstance(streams, dict):
        vids = sorted(streams)
        streams = [streams[v] for v in vids]
        gts = [gts[v] for v in vids]
    if not streams:
        return APResult({})
    probs = np.concatenate([s.probs for s in streams])
    labels = np.concatenate([g.labels for g in gts])
    if probs.shape != labels.shape:
        raise ValueError(f"streams {probs.shape} and ground truth {labels.shape} disagree")
    C = num_classes or probs.shape[1]
    return APResult({c: frame_ap(probs[:, c], labels[:, c]) for c in range(C)})


def temporal_iou(a, b) -> float:
    """IoU of two half-open frame intervals given as ``(start, end)`` or events."""
    a0, a1 = _bounds(a)
    b0, b1 = _bounds(b)
    inter = min(a1, b1) - max(a0, b0)
    if inter <= 0:
        return 0.0
    return inter / (max(a1, b1) - min(a0, b0))


def _bounds(x) -> tuple[int, int]:
    if isinstance(x, EventRecord):
        s, e = x.start_frame, x.end_frame
    else:
        s, e = x
    if s >= e:
        raise ValueError(f"degenerate interval [{s}, {e})")
    return s, e


def _rank(preds: Iterable[EventRecord]) -> list[EventRecord]:
    return sorted(preds, key=lambda p: (-p.score, p.start_frame, p.class_id, p.video_id))


def _iou_matrix(preds: Sequence[EventRecord], gts: Sequence[EventRecord]) -> np.ndarray:
    ps = np.array([[p.start_frame, p.end_frame] for p in preds], dtype=np.float64).reshape(-1, 2)
    gs = np.array([[g.start_frame, g.end_frame] for g in gts], dtype=np.float64).reshape(-1, 2)
    inter = np.minimum(ps[:, None, 1], gs[None, :, 1]) - np.maximum(ps[:, None, 0], gs[None, :, 0])
    union = np.maximum(ps[:, None, 1], gs[None, :, 1]) - np.minimum(ps[:, None, 0], gs[None, :, 0])
    return np.where(inter > 0, inter / union, 0.0)


def greedy_match(preds: Sequence[EventRecord], gts: Sequence[EventRecord], iou_thr: float) -> np.ndarray:
    """TP flags for ``preds`` in ranked order."""
    tp = np.zeros(len(preds), dtype=bool)
    if not preds or not gts:
        return tp
    iou = _iou_matrix(preds, gts)
    same = np.array([[p.video_id == g.video_id for g in gts] for p in preds])
    iou = np.where(same, iou, -1.0)
    used = np.zeros(len(gts), dtype=bool)
    for i in range(len(preds)):
        row = np.where(used, -1.0, iou[i])
        j = int(np.argmax(row))  # first GT on IoU ties
        if row[j] >= iou_thr and row[j] >= 0:
            used[j] = True
            tp[i] = True
    return tp


def temporal_ap(preds: Sequence[EventRecord], gts: Sequence[EventRecord], iou_thr: float) -> Optional[float]:
    """AP of predicted intervals of one class against its ground-truth intervals."""
    if not 0 < iou_thr <= 1:
        raise ValueError("iou_thr must be in (0, 1]")
    if not gts:
        return None
    ranked = _rank(preds)
    return interpolated_ap(greedy_match(ranked, gts, iou_thr), len(gts))


def oracle_match(preds: Sequence[EventRecord], gts: Sequence[EventRecord], iou_thr: float, limit: int = 8) -> int:
    """Maximum number of one-to-one pred/GT pairs with IoU >= ``iou_thr`` (exhaustive)."""
    if len(preds) > limit or len(gts) > limit:
        raise ValueError(f"oracle_match supports at most {limit} events per side")
    ok = [
        [p.video_id == g.video_id and temporal_iou(p, g) >= iou_thr for g in gts] for p in preds
    ]
    n_g = len(gts)
    for k in range(min(len(preds), n_g), 0, -1):
        for chosen in itertools.combinations(range(len(preds)), k):
            for perm in itertools.permutations(range(n_g), k):
                if all(ok[p][g] for p, g in zip(chosen, perm)):
                    return k
    return 0


@dataclass
class TemporalMAP:
    iou_thr: float
    per_video: dict  # video_id -> APResult
    excluded: list = field(default_factory=list)

    @property
    def video_maps(self) -> dict:
        return {v: r.map for v, r in sorted(self.per_video.items())}

    @property
    def overall(self) -> Optional[float]:
        return average_video_maps(self.video_maps.values())


def average_video_maps(values: Iterable[Optional[float]]) -> Optional[float]:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def temporal_map(
    preds: Iterable[EventRecord],
    gts: Iterable[EventRecord],
    iou_thr: float,
    videos: Optional[Iterable[str]] = None,
) -> TemporalMAP:
    """Per-video mAP over classes with GT events in that video, then the plain mean."""
    pred_groups = defaultdict(list)
    gt_groups = defaultdict(list)
    gt_videos = set()
    for p in preds:
        pred_groups[(p.video_id, p.class_id)].append(p)
    for g in gts:
        gt_groups[(g.video_id, g.class_id)].append(g)
        gt_videos.add(g.video_id)
    all_videos = sorted(set(videos) if videos is not None else gt_videos | {v for v, _ in pred_groups})
    per_video = {}
    excluded = []
    for vid in all_videos:
        classes = sorted(c for v, c in gt_groups if v == vid)
        if not classes:
            logger.warning("video %s has no ground-truth events; excluded from temporal mAP", vid)
            excluded.append(vid)
            continue
        per_video[vid] = APResult(
            {c: temporal_ap(pred_groups.get((vid, c), []), gt_groups[(vid, c)], iou_thr) for c in classes}
        )
    return TemporalMAP(iou_thr, per_video, excluded)
