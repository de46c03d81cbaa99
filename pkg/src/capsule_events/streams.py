"""Probability streams, frame ground truth and event records.

File formats (all temporal quantities are frame indices):

* probability streams, JSON Lines, one record per frame and source::

    {"video_id": "v0", "backbone_id": 0, "model_id": 2, "frame_index": 0, "probs": [...]}

  Fused streams carry ``null`` ids (``model_id`` only for backbone-level fusion).
* ground truth, JSON Lines: ``{"video_id", "frame_index", "labels": [class ids]}``
* events, CSV with header ``video_id,class_id,start_frame,end_frame,score``;
  intervals are half-open ``[start, end)``.
"""
from __future__ import annotations

import csv
import json
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Optional, Union

import numpy as np

FUSED = "fused"
FUSED_TTA = "fused-tta"

Source = Union[tuple, str]


class StreamError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ProbStream:
    """Per-frame class probabilities of one video from one source.

    ``source`` is ``(backbone_id, model_id)`` for a head, ``(backbone_id, None)``
    for a backbone-level fusion, or one of ``FUSED`` / ``FUSED_TTA``.
    """

    video_id: str
    source: Source
    probs: np.ndarray

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float64)
        if probs.ndim != 2:
            raise StreamError(f"{self.video_id}: probs must be a (frames, classes) matrix")
        if not np.all(np.isfinite(probs)) or probs.min(initial=0.0) < 0 or probs.max(initial=0.0) > 1:
            raise StreamError(f"{self.video_id}: probabilities must be finite and in [0, 1]")
        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)

    @property
    def num_frames(self) -> int:
        return self.probs.shape[0]

    @property
    def num_classes(self) -> int:
        return self.probs.shape[1]

    def with_probs(self, probs: np.ndarray, source: Optional[Source] = None) -> "ProbStream":
        return ProbStream(self.video_id, self.source if source is None else source, probs)


@dataclass(frozen=True, eq=False)
class GroundTruth:
    video_id: str
    labels: np.ndarray  # (frames, classes) of {0, 1}

    def __post_init__(self):
        labels = np.asarray(self.labels).astype(np.uint8)
        if labels.ndim != 2 or labels.max(initial=0) > 1:
            raise StreamError(f"{self.video_id}: labels must be a multi-hot matrix")
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)

    @property
    def num_frames(self) -> int:
        return self.labels.shape[0]


@dataclass(frozen=True, order=True)
class EventRecord:
    video_id: str
    class_id: int
    start_frame: int
    end_frame: int
    score: float = 1.0

    def __post_init__(self):
        if self.start_frame < 0 or self.end_frame <= self.start_frame:
            raise StreamError(
                f"invalid interval [{self.start_frame}, {self.end_frame}) "
                f"for video {self.video_id} class {self.class_id}"
            )
        if not 0.0 <= self.score <= 1.0:
            raise StreamError(f"event score {self.score} outside [0, 1]")

    @property
    def length(self) -> int:
        return self.end_frame - self.start_frame


# ---------------------------------------------------------------------------
# Stream helpers


def average_streams(a: ProbStream, b: ProbStream) -> ProbStream:
    """Elementwise mean of two aligned streams (e.g. original and flipped clips)."""
    if a.video_id != b.video_id or a.probs.shape != b.probs.shape:
        raise StreamError(
            f"cannot average {a.video_id}{a.probs.shape} with {b.video_id}{b.probs.shape}"
        )
    return ProbStream(a.video_id, FUSED_TTA, 0.5 * (a.probs + b.probs))


def segments(row: np.ndarray) -> list[tuple[int, int]]:
    """Maximal runs of truthy values as half-open ``(start, end)`` pairs."""
    row = np.asarray(row, dtype=bool)
    if row.size == 0:
        return []
    padded = np.concatenate(([False], row, [False]))
    edges = np.flatnonzero(padded[1:] != padded[:-1])
    return [(int(s), int(e)) for s, e in zip(edges[::2], edges[1::2])]


def ground_truth_events(gt: GroundTruth) -> list[EventRecord]:
    """Each contiguous positive run of each class becomes one event."""
    out = []
    for c in range(gt.labels.shape[1]):
        for s, e in segments(gt.labels[:, c]):
            out.append(EventRecord(gt.video_id, c, s, e, 1.0))
    return out


def check_ground_truth(gt: GroundTruth, space) -> None:
    """Ensure at most one region is positive per frame."""
    if gt.labels.shape[1] != space.num_classes:
        raise StreamError(
            f"{gt.video_id}: {gt.labels.shape[1]} classes, taxonomy has {space.num_classes}"
        )
    counts = gt.labels[:, space.regions].sum(axis=1)
    bad = np.flatnonzero(counts > 1)
    if bad.size:
        raise StreamError(f"{gt.video_id}: frame {int(bad[0])} has more than one region label")


def check_events(events: Iterable[EventRecord], lengths: Optional[dict] = None) -> None:
    """Per (video, class) events must be sorted, disjoint and within the video."""
    grouped = defaultdict(list)
    for ev in events:
        grouped[(ev.video_id, ev.class_id)].append(ev)
        if lengths is not None and ev.end_frame > lengths.get(ev.video_id, ev.end_frame):
            raise StreamError(f"event {ev} runs past the end of video {ev.video_id}")
    for key, evs in grouped.items():
        for prev, cur in zip(evs, evs[1:]):
            if cur.start_frame < prev.end_frame:
                raise StreamError(f"events for {key} overlap or are unsorted at {cur.start_frame}")


# ---------------------------------------------------------------------------
# JSONL / CSV I/O


def _source_key(rec: dict):
    b, m = rec.get("backbone_id"), rec.get("model_id")
    if b is None:
        return rec.get("source", FUSED)
    return (int(b), None if m is None else int(m))


def load_streams(path) -> list[ProbStream]:
    """Read and validate a probability-stream JSONL file.

    Streams are returned sorted by video id then source.
    """
    rows = defaultdict(list)  # key -> [(frame_index, lineno, probs)]
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                key = (str(rec["video_id"]), _source_key(rec))
                idx = int(rec["frame_index"])
                probs = rec["probs"]
                if not isinstance(probs, list):
                    raise TypeError("probs must be a list")
            except (ValueError, KeyError, TypeError) as exc:
                raise StreamError(f"{path}:{lineno}: malformed record ({exc})") from None
            rows[key].append((idx, lineno, probs))

    out = []
    lengths, width = {}, {}
    for key in sorted(rows, key=_sort_key):
        vid, src = key
        recs = sorted(rows[key], key=lambda r: (r[0], r[1]))
        linenos = [r[1] for r in recs]
        try:
            arr = np.asarray([r[2] for r in recs], dtype=np.float64)
        except (ValueError, TypeError):
            arr = None
        if arr is None or arr.ndim != 2:
            sizes = [len(r[2]) if isinstance(r[2], list) else -1 for r in recs]
            bad = next((i for i, n in enumerate(sizes) if n != sizes[0]), 0)
            raise StreamError(f"{path}:{linenos[bad]}: probs must be a flat list of {sizes[0]} numbers")
        ok = np.isfinite(arr) & (arr >= 0) & (arr <= 1)
        if not ok.all():
            raise StreamError(f"{path}:{linenos[int(np.flatnonzero(~ok.all(axis=1))[0])]}: probability outside [0, 1]")
        if width.setdefault(vid, arr.shape[1]) != arr.shape[1]:
            raise StreamError(f"{path}:{linenos[0]}: expected {width[vid]} classes for video {vid}, got {arr.shape[1]}")
        idx = np.array([r[0] for r in recs])
        n = idx.size
        if not np.array_equal(idx, np.arange(n)):
            k = int(np.flatnonzero(idx != np.arange(n))[0])
            raise StreamError(
                f"{path}:{linenos[k]}: video {vid} source {src}: bad or duplicate frame_index {idx[k]}; "
                f"indices must be 0..{n - 1}"
            )
        if lengths.setdefault(vid, n) != n:
            raise StreamError(f"{path}: video {vid}: sources disagree on length ({lengths[vid]} vs {n})")
        out.append(ProbStream(vid, src, arr))
    return out


def _sort_key(key):
    vid, src = key
    if isinstance(src, str):
        return (vid, 1, src, -1, -1)
    b, m = src
    return (vid, 0, "", b, -1 if m is None else m)


def _fmt_probs(row) -> str:
    return "[" + ",".join(format(float(p), ".6g") for p in row) + "]"


def save_streams(streams: Iterable[ProbStream], path) -> None:
    with open(path, "w") as fh:
        for s in streams:
            if isinstance(s.source, str):
                head = f'"backbone_id":null,"model_id":null,"source":{json.dumps(s.source)}'
            else:
                b, m = s.source
                head = f'"backbone_id":{b},"model_id":{"null" if m is None else m}'
            vid = json.dumps(s.video_id)
            for t, row in enumerate(s.probs):
                fh.write(f'{{"video_id":{vid},{head},"frame_index":{t},"probs":{_fmt_probs(row)}}}\n')


def load_ground_truth(path, num_classes: Optional[int] = None) -> list[GroundTruth]:
    frames = defaultdict(dict)
    max_class = -1
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                vid = str(rec["video_id"])
                idx = int(rec["frame_index"])
                labels = [int(c) for c in rec["labels"]]
            except (ValueError, KeyError, TypeError) as exc:
                raise StreamError(f"{path}:{lineno}: malformed record ({exc})") from None
            if idx < 0 or idx in frames[vid]:
                raise StreamError(f"{path}:{lineno}: bad or duplicate frame_index {idx}")
            if any(c < 0 or (num_classes is not None and c >= num_classes) for c in labels):
                raise StreamError(f"{path}:{lineno}: class id out of range")
            frames[vid][idx] = labels
            max_class = max([max_class, *labels])
    C = num_classes if num_classes is not None else max_class + 1
    out = []
    for vid in sorted(frames):
        rows = frames[vid]
        n = len(rows)
        if set(rows) != set(range(n)):
            raise StreamError(f"{path}: video {vid}: frame indices are not 0..{n - 1}")
        mat = np.zeros((n, C), dtype=np.uint8)
        for t, labels in rows.items():
            mat[t, labels] = 1
        out.append(GroundTruth(vid, mat))
    return out


def save_ground_truth(gts: Iterable[GroundTruth], path) -> None:
    with open(path, "w") as fh:
        for gt in gts:
            vid = json.dumps(gt.video_id)
            for t, row in enumerate(gt.labels):
                labels = ",".join(str(int(c)) for c in np.flatnonzero(row))
                fh.write(f'{{"video_id":{vid},"frame_index":{t},"labels":[{labels}]}}\n')


EVENT_FIELDS = ["video_id", "class_id", "start_frame", "end_frame", "score"]


def save_events(events: Iterable[EventRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(EVENT_FIELDS)
        for ev in events:
            writer.writerow([ev.video_id, ev.class_id, ev.start_frame, ev.end_frame, f"{ev.score:.6f}"])


def load_events(path) -> list[EventRecord]:
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or set(EVENT_FIELDS) - set(reader.fieldnames):
            raise StreamError(f"{path}: header must contain {','.join(EVENT_FIELDS)}")
        for lineno, row in enumerate(reader, 2):
            try:
                out.append(
                    EventRecord(
                        row["video_id"],
                        int(row["class_id"]),
                        int(row["start_frame"]),
                        int(row["end_frame"]),
                        float(row["score"]),
                    )
                )
            except (ValueError, TypeError) as exc:
                raise StreamError(f"{path}:{lineno}: {exc}") from None
    return out


def group_by_video(streams: Iterable[ProbStream]) -> dict[str, list[ProbStream]]:
    out = defaultdict(list)
    for s in streams:
        out[s.video_id].append(s)
    return dict(out)
