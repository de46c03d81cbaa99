"""Validation-guided hierarchical fusion and temperature calibration.

Head streams of one backbone are mixed with class-wise weights proportional
to each head's validation AP for that class; the backbone-level streams are
then mixed with weights proportional to each backbone's validation frame
mAP. Finally logits are divided by a temperature.
"""
from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy.special import expit

from .metrics import frame_ap, frame_map
from .streams import FUSED, GroundTruth, ProbStream

LOGIT_EPS = 1e-6


class FusionError(ValueError):
    pass


@dataclass
class FusionWeights:
    """``alpha[b][m]`` is a per-class weight vector; ``beta[b]`` a scalar."""

    alpha: dict = field(default_factory=dict)
    beta: dict = field(default_factory=dict)
    temperature: float = 1.0

    def validate(self, tol: float = 1e-9) -> None:
        for b, models in self.alpha.items():
            stacked = np.stack([np.asarray(w, dtype=np.float64) for w in models.values()])
            if np.any(stacked < 0):
                raise FusionError(f"negative model weight for backbone {b}")
            if not np.allclose(stacked.sum(axis=0), 1.0, atol=tol, rtol=0):
                raise FusionError(f"model weights for backbone {b} do not sum to 1")
        if self.beta:
            betas = np.array(list(self.beta.values()), dtype=np.float64)
            if np.any(betas < 0) or abs(betas.sum() - 1.0) > tol:
                raise FusionError("backbone weights must be non-negative and sum to 1")
        if not (np.isfinite(self.temperature) and self.temperature > 0):
            raise FusionError(f"temperature must be finite and positive, got {self.temperature}")

    def to_dict(self) -> dict:
        return {
            "alpha": {
                str(b): {str(m): [float(x) for x in w] for m, w in sorted(models.items())}
                for b, models in sorted(self.alpha.items())
            },
            "beta": {str(b): float(v) for b, v in sorted(self.beta.items())},
            "temperature": float(self.temperature),
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "FusionWeights":
        alpha = {
            int(b): {int(m): np.asarray(w, dtype=np.float64) for m, w in models.items()}
            for b, models in raw.get("alpha", {}).items()
        }
        beta = {int(b): float(v) for b, v in raw.get("beta", {}).items()}
        out = cls(alpha, beta, float(raw.get("temperature", 1.0)))
        out.validate()
        return out

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "FusionWeights":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _normalise(values: np.ndarray) -> np.ndarray:
    """Proportional weights along axis 0, uniform where everything is zero."""
    total = values.sum(axis=0)
    uniform = np.full_like(values, 1.0 / values.shape[0])
    with np.errstate(invalid="ignore", divide="ignore"):
        w = np.where(total > 0, values / np.where(total > 0, total, 1.0), uniform)
    return w


def compute_model_weights(val_aps: Mapping) -> dict:
    """Class-wise head weights from validation APs.

    ``val_aps`` maps ``(backbone, model, class) -> AP or None``. Missing APs
    count as zero; a class where every head scores zero falls back to uniform.
    Returns ``{backbone: {model: weight vector over classes}}``.
    """
    per_backbone = defaultdict(lambda: defaultdict(dict))
    num_classes = 0
    for (b, m, c), ap in val_aps.items():
        if ap is not None and ap < 0:
            raise FusionError(f"negative AP for backbone {b} model {m} class {c}")
        per_backbone[b][m][c] = 0.0 if ap is None else float(ap)
        num_classes = max(num_classes, c + 1)
    alpha = {}
    for b in sorted(per_backbone):
        models = sorted(per_backbone[b])
        mat = np.array(
            [[per_backbone[b][m].get(c, 0.0) for c in range(num_classes)] for m in models]
        )
        w = _normalise(mat)
        alpha[b] = {m: w[i] for i, m in enumerate(models)}
    return alpha


def uniform_model_weights(models_by_backbone: Mapping, num_classes: int) -> dict:
    out = {}
    for b, models in sorted(models_by_backbone.items()):
        models = sorted(models)
        out[b] = {m: np.full(num_classes, 1.0 / len(models)) for m in models}
    return out


def compute_backbone_weights(val_frame_maps: Mapping) -> dict:
    """Backbone weights proportional to validation frame mAP (uniform if all zero)."""
    if not val_frame_maps:
        raise FusionError("at least one backbone is required")
    keys = sorted(val_frame_maps)
    vals = np.array([0.0 if val_frame_maps[b] is None else float(val_frame_maps[b]) for b in keys])
    if np.any(vals < 0):
        raise FusionError("negative backbone mAP")
    w = _normalise(vals[:, None])[:, 0]
    return {b: float(x) for b, x in zip(keys, w)}


def fuse_models(streams: Sequence[ProbStream], alpha_b: Mapping) -> ProbStream:
    """Class-wise convex combination of the head streams of one backbone."""
    by_model = {s.source[1]: s for s in streams}
    if not streams:
        raise FusionError("no streams to fuse")
    first = streams[0]
    backbone = first.source[0]
    acc = np.zeros_like(first.probs)
    for m, w in sorted(alpha_b.items()):
        if m not in by_model:
            raise FusionError(f"video {first.video_id}: no stream for backbone {backbone} model {m}")
        s = by_model[m]
        if s.probs.shape != first.probs.shape:
            raise FusionError(f"video {first.video_id}: stream shapes differ")
        acc += np.asarray(w)[None, :] * s.probs
    return ProbStream(first.video_id, (backbone, None), np.clip(acc, 0.0, 1.0))


def fuse_backbones(streams: Sequence[ProbStream], beta: Mapping) -> ProbStream:
    """Convex combination of backbone-level streams."""
    by_backbone = {s.source[0]: s for s in streams}
    first = streams[0]
    acc = np.zeros_like(first.probs)
    for b, w in sorted(beta.items()):
        if w == 0:
            continue
        if b not in by_backbone:
            raise FusionError(f"video {first.video_id}: no stream for backbone {b}")
        acc += w * by_backbone[b].probs
    return ProbStream(first.video_id, FUSED, np.clip(acc, 0.0, 1.0))


def logit(p):
    p = np.clip(np.asarray(p, dtype=np.float64), LOGIT_EPS, 1.0 - LOGIT_EPS)
    return np.log(p) - np.log1p(-p)


def sigmoid(z):
    return expit(np.asarray(z, dtype=np.float64))


def calibrate_probs(probs: np.ndarray, temperature: float) -> np.ndarray:
    if not (np.isfinite(temperature) and temperature > 0):
        raise FusionError(f"temperature must be positive, got {temperature}")
    if temperature == 1.0:
        return np.clip(np.asarray(probs, dtype=np.float64), LOGIT_EPS, 1.0 - LOGIT_EPS)
    return sigmoid(logit(probs) / temperature)


def calibrate(stream: ProbStream, temperature: float) -> ProbStream:
    """Temperature-scale a stream; probabilities are clamped to [1e-6, 1-1e-6] first."""
    return stream.with_probs(calibrate_probs(stream.probs, temperature))


# ---------------------------------------------------------------------------
# Fitting on validation data


def head_aps(val_streams: Sequence[ProbStream], gts: Mapping[str, GroundTruth]) -> dict:
    """Validation AP per (backbone, model, class) over concatenated frames."""
    grouped = defaultdict(list)
    for s in val_streams:
        if isinstance(s.source, tuple) and s.source[1] is not None:
            grouped[s.source].append(s)
    out = {}
    for (b, m), streams in sorted(grouped.items()):
        streams = sorted(streams, key=lambda s: s.video_id)
        probs = np.concatenate([s.probs for s in streams])
        labels = np.concatenate([gts[s.video_id].labels for s in streams])
        for c in range(probs.shape[1]):
            out[(b, m, c)] = frame_ap(probs[:, c], labels[:, c])
    return out


def fuse_video(streams: Sequence[ProbStream], weights: FusionWeights, calibrated: bool = True) -> ProbStream:
    """Full hierarchical fusion of all head streams of one video."""
    by_backbone = defaultdict(list)
    for s in streams:
        by_backbone[s.source[0]].append(s)
    backbone_streams = [
        fuse_models(by_backbone[b], weights.alpha[b]) for b in sorted(weights.alpha) if weights.beta.get(b, 0) > 0
    ]
    fused = fuse_backbones(backbone_streams, weights.beta)
    return calibrate(fused, weights.temperature) if calibrated else fused


def fit_fusion_weights(
    val_streams: Sequence[ProbStream],
    gts: Mapping[str, GroundTruth],
    model_weighting: str = "ap",
    backbone_weighting: str = "map",
    backbones: Optional[Sequence[int]] = None,
) -> FusionWeights:
    """Derive alpha and beta from validation streams.

    ``model_weighting`` / ``backbone_weighting`` select ``"uniform"`` to
    reproduce the plain-averaging ablations; ``backbones`` restricts fusion to
    a subset (single-backbone arms).
    """
    heads = [s for s in val_streams if isinstance(s.source, tuple) and s.source[1] is not None]
    if backbones is not None:
        heads = [s for s in heads if s.source[0] in set(backbones)]
    if not heads:
        raise FusionError("no head streams available for fusion")
    num_classes = heads[0].num_classes
    models = defaultdict(set)
    for s in heads:
        models[s.source[0]].add(s.source[1])
    if model_weighting == "ap":
        alpha = compute_model_weights(head_aps(heads, gts))
    elif model_weighting == "uniform":
        alpha = uniform_model_weights(models, num_classes)
    else:
        raise FusionError(f"unknown model weighting {model_weighting!r}")

    if backbone_weighting == "uniform":
        beta = {b: 1.0 / len(alpha) for b in sorted(alpha)}
    elif backbone_weighting == "map":
        maps = {}
        for b in sorted(alpha):
            per_video = defaultdict(list)
            for s in heads:
                if s.source[0] == b:
                    per_video[s.video_id].append(s)
            fused = {v: fuse_models(ss, alpha[b]) for v, ss in per_video.items()}
            maps[b] = frame_map(fused, {v: gts[v] for v in fused}).map or 0.0
        beta = compute_backbone_weights(maps)
    else:
        raise FusionError(f"unknown backbone weighting {backbone_weighting!r}")
    weights = FusionWeights(alpha, beta, 1.0)
    weights.validate()
    return weights
