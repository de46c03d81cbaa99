"""Seeded synthetic corpus with capsule-endoscopy structure.

Ground truth per video: contiguous regions in transit order, one landmark
segment straddling each landmark's region boundary, and sparse pathology
events drawn at per-class rates. Predictions emulate two backbones with
five heads each:

* backbone 0 adds AR(1) noise with high correlation (smooth, persistent errors),
* backbone 1 adds independent per-frame noise, lower on pathologies.

Each head rescales and biases the clean logit ``L * (2y - 1)`` of every
class; a head may be "degraded" on a class (weak signal), which is what
makes class-wise head weighting matter.

Randomness: ``SeedSequence(seed)`` feeds three independent generators, in
this order of use: per-video ground truth ``[seed, 0, i]``, head properties
``[seed, 1]``, per-video prediction noise ``[seed, 2, i]``. Changing the
video count therefore never changes existing videos.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import yaml
from scipy.signal import lfilter
from scipy.special import expit

from .streams import (
    GroundTruth,
    ProbStream,
    check_ground_truth,
    ground_truth_events,
    save_events,
    save_ground_truth,
    save_streams,
)
from .taxonomy import LabelSpace, dump_taxonomy, region_rank


class SynthError(ValueError):
    pass


@dataclass
class BackboneNoise:
    std: float = 1.5
    pathology_std: Optional[float] = None  # defaults to std
    rho: float = 0.0

    def class_std(self, kind: str) -> float:
        if kind == "pathology" and self.pathology_std is not None:
            return self.pathology_std
        return self.std


def _default_backbones():
    return [
        BackboneNoise(std=1.6, pathology_std=1.9, rho=0.9),
        BackboneNoise(std=2.4, pathology_std=1.5, rho=0.0),
    ]


@dataclass
class SynthConfig:
    seed: int = 0
    n_train: int = 12
    n_val: int = 4
    n_test: int = 4
    frames: tuple = (2600, 3400)
    region_shares: tuple = (0.03, 0.07, 0.2, 0.45, 0.25)  # expected share per region, transit order
    region_concentration: float = 40.0
    min_region_frames: int = 20
    pathology_rates: Optional[tuple] = (2.0, 1.5, 1.5, 1.2, 1.0, 0.8)  # events / 1000 frames
    pathology_duration: tuple = (20, 120)
    landmark_duration: tuple = (10, 30)
    logit_scale: float = 2.5
    backbones: list = field(default_factory=_default_backbones)
    heads_per_backbone: int = 5
    head_bias: tuple = (-0.3, 0.3)
    head_scale: tuple = (0.8, 1.2)
    head_noise_std: float = 0.5
    degraded_prob: float = 0.3
    degraded_signal: float = 0.3

    def __post_init__(self):
        self.backbones = [b if isinstance(b, BackboneNoise) else BackboneNoise(**b) for b in self.backbones]
        self.frames = tuple(self.frames)
        for b in self.backbones:
            if not 0 <= b.rho < 1:
                raise SynthError("rho must lie in [0, 1)")
        if self.pathology_rates is not None:
            self.pathology_rates = tuple(self.pathology_rates)
            if any(r < 0 for r in self.pathology_rates):
                raise SynthError("pathology rates must be >= 0")
            if self.pathology_rates and max(self.pathology_rates) <= 0:
                raise SynthError("at least one pathology rate must be positive")
        lo, hi = self.head_bias
        if max(abs(lo), abs(hi)) >= self.logit_scale * self.head_scale[0] * self.degraded_signal:
            raise SynthError("head bias range is large enough to flip clean predictions")

    @property
    def n_videos(self) -> int:
        return self.n_train + self.n_val + self.n_test

    def noise_free(self) -> "SynthConfig":
        """Same corpus layout with every noise source switched off."""
        raw = asdict(self)
        raw["backbones"] = [dict(b, std=0.0, pathology_std=0.0) for b in raw["backbones"]]
        raw["head_noise_std"] = 0.0
        return SynthConfig(**raw)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "SynthConfig":
        raw = dict(raw or {})
        for key in ("frames", "region_shares", "pathology_rates", "pathology_duration", "landmark_duration", "head_bias", "head_scale"):
            if raw.get(key) is not None:
                raw[key] = tuple(raw[key])
        return cls(**raw)


def video_ids(cfg: SynthConfig) -> list[str]:
    return [f"vid{i:03d}" for i in range(cfg.n_videos)]


def split_manifest(cfg: SynthConfig) -> dict:
    ids = video_ids(cfg)
    a, b = cfg.n_train, cfg.n_train + cfg.n_val
    return {"train": ids[:a], "val": ids[a:b], "test": ids[b:]}


# ---------------------------------------------------------------------------
# ground truth


def _region_lengths(rng, n: int, cfg: SynthConfig, num_regions: int) -> np.ndarray:
    shares = np.asarray(cfg.region_shares[:num_regions], dtype=np.float64)
    if shares.size < num_regions:
        shares = np.full(num_regions, 1.0 / num_regions)
    shares = shares / shares.sum()
    if n < num_regions * cfg.min_region_frames:
        raise SynthError(f"video of {n} frames is too short for {num_regions} regions")
    # stick breaking with expected share per region
    out = np.empty(num_regions)
    remaining = 1.0
    for r in range(num_regions - 1):
        mu = min(max(shares[r] / shares[r:].sum(), 1e-3), 1 - 1e-3)
        v = rng.beta(cfg.region_concentration * mu, cfg.region_concentration * (1 - mu))
        out[r] = remaining * v
        remaining -= out[r]
    out[-1] = remaining
    lengths = np.maximum(np.round(out * n).astype(int), cfg.min_region_frames)
    lengths[np.argmax(lengths)] += n - lengths.sum()
    return lengths


def generate_video_gt(rng, video_id: str, n: int, cfg: SynthConfig, space: LabelSpace) -> GroundTruth:
    C = space.num_classes
    labels = np.zeros((n, C), dtype=np.uint8)
    order = space.regions
    lengths = _region_lengths(rng, n, cfg, len(order))
    starts = np.concatenate(([0], np.cumsum(lengths)[:-1]))
    for r, s, length in zip(order, starts, lengths):
        labels[s : s + length, r] = 1

    for lm in space.landmarks:
        rule = space.landmark_rules.get(lm)
        if rule is not None:
            ranks = sorted(region_rank(space, r) for r in rule.valid_regions)
            boundary_rank = min(ranks[0] + 1, len(order) - 1)
        else:
            boundary_rank = int(rng.integers(1, len(order))) if len(order) > 1 else 0
        boundary = int(starts[boundary_rank])
        d = int(rng.integers(cfg.landmark_duration[0], cfg.landmark_duration[1] + 1))
        s = boundary - int(round(rng.uniform(0.3, 0.7) * d))
        s, e = max(0, s), min(n, s + d)
        if e > s:
            labels[s:e, lm] = 1

    rates = cfg.pathology_rates
    for i, c in enumerate(space.pathologies):
        rate = rates[i] if rates is not None and i < len(rates) else 1.0
        count = int(rng.poisson(rate * n / 1000.0)) if rate > 0 else 0
        lo, hi = cfg.pathology_duration
        placed = []
        for _ in range(count):
            for _attempt in range(20):
                d = int(rng.integers(lo, hi + 1))
                if d >= n:
                    break
                s = int(rng.integers(0, n - d + 1))
                # keep a one-frame gap so runs stay distinct events
                if all(s > pe or s + d < ps for ps, pe in placed):
                    placed.append((s, s + d))
                    labels[s : s + d, c] = 1
                    break
    gt = GroundTruth(video_id, labels)
    check_ground_truth(gt, space)
    return gt


def generate_ground_truth(cfg: SynthConfig, space: LabelSpace) -> list[GroundTruth]:
    out = []
    for i, vid in enumerate(video_ids(cfg)):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0, i]))
        n = int(rng.integers(cfg.frames[0], cfg.frames[1] + 1))
        out.append(generate_video_gt(rng, vid, n, cfg, space))
    return out


# ---------------------------------------------------------------------------
# predictions


@dataclass
class HeadProfile:
    scale: np.ndarray  # (C,)
    bias: np.ndarray
    signal: np.ndarray


def head_profiles(cfg: SynthConfig, num_classes: int) -> dict:
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    out = {}
    for b in range(len(cfg.backbones)):
        for m in range(cfg.heads_per_backbone):
            scale = rng.uniform(*cfg.head_scale, size=num_classes)
            bias = rng.uniform(*cfg.head_bias, size=num_classes)
            degraded = rng.random(num_classes) < cfg.degraded_prob
            signal = np.where(degraded, cfg.degraded_signal, 1.0)
            out[(b, m)] = HeadProfile(scale, bias, signal)
    return out


def ar1_noise(rng, n: int, stds: np.ndarray, rho: float) -> np.ndarray:
    """Stationary AR(1) noise with per-column marginal std."""
    eps = rng.standard_normal((n, stds.size))
    if rho == 0:
        return eps * stds
    e0 = rng.standard_normal(stds.size)
    zi = (rho * e0)[None, :]
    unit = lfilter([np.sqrt(1 - rho**2)], [1.0, -rho], eps, axis=0, zi=zi * 1.0)[0]
    return unit * stds


def generate_predictions(gts: list[GroundTruth], cfg: SynthConfig, space: LabelSpace) -> list[ProbStream]:
    C = space.num_classes
    kinds = [space.kind(c) for c in range(C)]
    profiles = head_profiles(cfg, C)
    out = []
    for i, gt in enumerate(gts):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2, i]))
        clean = cfg.logit_scale * (2.0 * gt.labels.astype(np.float64) - 1.0)
        n = gt.num_frames
        for b, noise in enumerate(cfg.backbones):
            stds = np.array([noise.class_std(k) for k in kinds])
            shared = ar1_noise(rng, n, stds, noise.rho)
            for m in range(cfg.heads_per_backbone):
                prof = profiles[(b, m)]
                z = prof.scale * prof.signal * clean + prof.bias + shared
                if cfg.head_noise_std > 0:
                    z = z + cfg.head_noise_std * rng.standard_normal((n, C))
                out.append(ProbStream(gt.video_id, (b, m), expit(z)))
    return out


def generate_features(gts: list[GroundTruth], cfg: SynthConfig, space: LabelSpace, dim: int = 16) -> dict:
    """Per-backbone feature matrices: noisy class evidence mixed through a random projection."""
    C = space.num_classes
    kinds = [space.kind(c) for c in range(C)]
    rng_proj = np.random.default_rng(np.random.SeedSequence([cfg.seed, 3]))
    out = {}
    for b, noise in enumerate(cfg.backbones):
        proj = rng_proj.normal(0, 1 / np.sqrt(C), (C, dim))
        feats = {}
        for i, gt in enumerate(gts):
            rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 4, b, i]))
            clean = cfg.logit_scale * (2.0 * gt.labels.astype(np.float64) - 1.0)
            stds = np.array([noise.class_std(k) for k in kinds])
            evidence = clean + ar1_noise(rng, gt.num_frames, stds, noise.rho)
            feats[gt.video_id] = evidence @ proj + 0.05 * rng.standard_normal((gt.num_frames, dim))
        out[b] = feats
    return out


def write_corpus(cfg: SynthConfig, space: LabelSpace, out_dir, features: bool = False) -> dict:
    """Write taxonomy, streams, GT, GT events and split manifest; returns the paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    gts = generate_ground_truth(cfg, space)
    streams = generate_predictions(gts, cfg, space)
    paths = {
        "taxonomy": out_dir / "taxonomy.yaml",
        "streams": out_dir / "streams.jsonl",
        "ground_truth": out_dir / "gt.jsonl",
        "gt_events": out_dir / "gt_events.csv",
        "split": out_dir / "split.json",
        "synth_config": out_dir / "synth_config.yaml",
    }
    dump_taxonomy(space, paths["taxonomy"])
    save_streams(streams, paths["streams"])
    save_ground_truth(gts, paths["ground_truth"])
    save_events([ev for gt in gts for ev in ground_truth_events(gt)], paths["gt_events"])
    paths["split"].write_text(json.dumps(split_manifest(cfg), indent=2) + "\n")
    paths["synth_config"].write_text(yaml.safe_dump(_plain(cfg.to_dict()), sort_keys=True))
    if features:
        for b, feats in generate_features(gts, cfg, space).items():
            p = out_dir / f"features_b{b}.npz"
            np.savez(p, **feats)
            paths[f"features_b{b}"] = p
    return paths


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def region_ranks(labels: np.ndarray, space: LabelSpace) -> np.ndarray:
    """Transit rank per frame (-1 where no region is labelled)."""
    order = space.regions
    sub = labels[:, order]
    ranks = np.where(sub.any(axis=1), np.argmax(sub, axis=1), -1)
    return ranks

