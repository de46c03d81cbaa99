"""Config-driven stage execution with digest-checked resumability.

Every stage declares its input files and parameters. Their digests form a
stage key; a stage is skipped when the previous manifest in the output
directory holds the same key and all recorded outputs still hash to the
recorded values.
"""
from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Optional

import numpy as np
import yaml

from . import __version__
from .decode import DecodeConfig, arm_config, parallel_map
from .fusion import FusionWeights, fit_fusion_weights
from .heads import HeadSpec, default_head_specs, load_head_specs, predict_head, spec_to_dict, train_head
from .pipeline import (
    ABLATION_HEADER,
    ARM_NAMES,
    CLI_ARMS,
    TuningOptions,
    ablation_records,
    apply_arm,
    decode_arm,
    decode_streams,
    evaluate,
    format_ablation,
    format_report,
    fuse_all,
    gts_by_video,
    run_ablation,
    split_streams,
)
from .streams import (
    GroundTruth,
    ground_truth_events,
    load_events,
    load_ground_truth,
    load_streams,
    save_events,
    save_streams,
)
from .synth import SynthConfig, write_corpus
from .taxonomy import LabelSpace, default_taxonomy_path, load_taxonomy
from .tuning import (
    DEFAULT_DECODE_GRID,
    DEFAULT_TEMPERATURE_GRID,
    OBJECTIVES,
    TuneReport,
    grid_search_temperature,
    smoothing_windows,
    tune_calibrated,
)

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
TOOL_NAME = "capsule-events"


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


# ---------------------------------------------------------------------------
# config

DEFAULT_CONFIG = {
    "seed": 0,
    "workers": None,
    "taxonomy": None,  # path; null selects the bundled taxonomy
    "synth": {},  # SynthConfig overrides; ignored when inputs are given
    "inputs": None,  # {streams, ground_truth, split} to skip synthesis
    "heads": {"enabled": False, "specs": None, "split": "train"},
    "fusion": {"model_weighting": "ap", "backbone_weighting": "map", "backbones": None, "split": "val"},
    "calibration": {"temperature_grid": list(DEFAULT_TEMPERATURE_GRID), "objective": "f1"},
    "tuning": {
        "objective": "mean",
        "delta0": 0.05,
        "max_iters": 50,
        "decode_grid": {k: list(v) for k, v in DEFAULT_DECODE_GRID.items()},
        "base": {},
    },
    "decode": {"arm": "full", "backbone": None, "split": "test"},
    "eval": {"split": "test"},
    "ablation": {"arms": list(ARM_NAMES), "split": "test"},
}
# Sections whose contents are free-form and not checked key by key.
_OPAQUE = {"synth", "inputs", "base", "decode_grid", "specs"}


def _merge(base: dict, override: Mapping, prefix: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        name = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(f"{name}: unknown configuration key")
        if isinstance(base[key], dict) and key not in _OPAQUE:
            if not isinstance(val, Mapping):
                raise ConfigError(f"{name}: expected a mapping")
            out[key] = _merge(base[key], val, name + ".")
        else:
            out[key] = copy.deepcopy(val)
    return out


def _resolve(path, root: Path, field_name: str, required: bool = True) -> Optional[Path]:
    if path is None:
        if required:
            raise ConfigError(f"{field_name}: path is required")
        return None
    p = Path(path)
    if not p.is_absolute():
        p = root / p
    if not p.is_file():
        raise ConfigError(f"{field_name}: no such file: {p}")
    return p


def load_config(path=None, overrides: Optional[Mapping] = None) -> dict:
    """Defaults, then the YAML file, then ``overrides`` (flattened dotted keys)."""
    raw, root = {}, Path.cwd()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config: no such file: {path}")
        with open(path) as fh:
            raw = yaml.safe_load(fh) or {}
        if not isinstance(raw, Mapping):
            raise ConfigError("config: top level must be a mapping")
        root = path.resolve().parent
    cfg = _merge(DEFAULT_CONFIG, raw)
    for dotted, val in (overrides or {}).items():
        if val is None:
            continue
        nested = val
        for part in reversed(dotted.split(".")):
            nested = {part: nested}
        cfg = _merge(cfg, nested)
    validate_config(cfg, root)
    return cfg


def validate_config(cfg: dict, root: Path) -> None:
    cfg["taxonomy"] = str(_resolve(cfg["taxonomy"], root, "taxonomy")) if cfg["taxonomy"] is not None else None
    if cfg["inputs"] is not None:
        if not isinstance(cfg["inputs"], Mapping):
            raise ConfigError("inputs: expected a mapping")
        extra = set(cfg["inputs"]) - {"streams", "ground_truth", "split", "features"}
        if extra:
            raise ConfigError(f"inputs.{sorted(extra)[0]}: unknown configuration key")
        for key in ("streams", "ground_truth", "split"):
            cfg["inputs"][key] = str(_resolve(cfg["inputs"].get(key), root, f"inputs.{key}"))
        feats = cfg["inputs"].get("features") or {}
        cfg["inputs"]["features"] = {
            str(b): str(_resolve(p, root, f"inputs.features.{b}")) for b, p in sorted(feats.items())
        }
    if isinstance(cfg["heads"]["specs"], str):
        cfg["heads"]["specs"] = str(_resolve(cfg["heads"]["specs"], root, "heads.specs"))
    if cfg["heads"]["enabled"] and cfg["inputs"] is not None and not cfg["inputs"]["features"]:
        raise ConfigError("inputs.features: required when heads.enabled is true")
    try:
        SynthConfig.from_dict(dict(cfg["synth"], seed=cfg["seed"]))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"synth: {exc}") from None
    for section in ("fusion",):
        for key in ("model_weighting", "backbone_weighting"):
            if cfg[section][key] not in ("ap", "map", "uniform"):
                raise ConfigError(f"{section}.{key}: unknown weighting {cfg[section][key]!r}")
    if cfg["tuning"]["objective"] not in OBJECTIVES:
        raise ConfigError(f"tuning.objective: must be one of {OBJECTIVES}")
    if cfg["decode"]["arm"] not in CLI_ARMS:
        raise ConfigError(f"decode.arm: must be one of {CLI_ARMS}")
    for name in cfg["ablation"]["arms"]:
        if name not in ARM_NAMES:
            raise ConfigError(f"ablation.arms: unknown arm {name!r}")
    try:
        DecodeConfig.from_dict(cfg["tuning"]["base"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"tuning.base: {exc}") from None
    for key in ("fusion", "decode", "eval", "ablation"):
        if cfg[key]["split"] not in ("train", "val", "test"):
            raise ConfigError(f"{key}.split: must be train, val or test")


# ---------------------------------------------------------------------------
# digests and manifest


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def value_digest(value) -> str:
    return hashlib.sha256(json.dumps(value, sort_keys=True, default=str).encode()).hexdigest()


@dataclass
class StageRecord:
    key: str
    status: str
    outputs: dict  # name -> {"path", "sha256"}
    wall_clock_s: float


@dataclass
class RunManifest:
    tool: str = TOOL_NAME
    version: str = __version__
    seed: Optional[int] = None
    config_digest: Optional[str] = None
    inputs: dict = field(default_factory=dict)  # name -> {"path", "sha256"}
    stages: dict = field(default_factory=dict)  # name -> StageRecord

    def to_dict(self) -> dict:
        return {
            "tool": self.tool,
            "version": self.version,
            "seed": self.seed,
            "config_digest": self.config_digest,
            "inputs": self.inputs,
            "stages": {
                name: {"key": r.key, "status": r.status, "outputs": r.outputs, "wall_clock_s": r.wall_clock_s}
                for name, r in self.stages.items()
            },
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "RunManifest":
        stages = {name: StageRecord(**rec) for name, rec in raw.get("stages", {}).items()}
        return cls(
            raw.get("tool", TOOL_NAME),
            raw.get("version", __version__),
            raw.get("seed"),
            raw.get("config_digest"),
            raw.get("inputs", {}),
            stages,
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "RunManifest":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


class StageRunner:
    """Runs stages under ``out_dir`` and keeps ``manifest.json`` up to date."""

    def __init__(self, out_dir, force: bool = False):
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.force = force
        self.manifest_path = self.out / MANIFEST_NAME
        self.previous = RunManifest.load(self.manifest_path) if self.manifest_path.exists() else RunManifest()
        self.manifest = RunManifest(stages={})

    def _rel(self, path: Path) -> str:
        try:
            return str(Path(path).resolve().relative_to(self.out.resolve()))
        except ValueError:
            return str(path)

    def _abs(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.out / p

    def record_input(self, name: str, path) -> None:
        self.manifest.inputs[name] = {"path": str(path), "sha256": file_digest(path)}

    def _reusable(self, name: str, key: str) -> Optional[dict]:
        prev = self.previous.stages.get(name)
        if self.force or prev is None or prev.key != key:
            return None
        for rec in prev.outputs.values():
            p = self._abs(rec["path"])
            if not p.is_file() or file_digest(p) != rec["sha256"]:
                return None
        return {n: self._abs(rec["path"]) for n, rec in prev.outputs.items()}

    def run(self, name: str, inputs: Mapping[str, Path], params, fn: Callable[[], Mapping[str, Path]]) -> dict:
        """Execute ``fn`` unless an identical earlier execution can be reused."""
        key = value_digest(
            {
                "stage": name,
                "version": __version__,
                "params": params,
                "inputs": {k: file_digest(p) for k, p in sorted(inputs.items())},
            }
        )
        reused = self._reusable(name, key)
        if reused is not None:
            logger.info("stage %s: inputs unchanged, skipped", name)
            prev = self.previous.stages[name]
            self.manifest.stages[name] = StageRecord(key, "skipped", prev.outputs, 0.0)
            self.save()
            return reused
        logger.info("stage %s: running", name)
        start = time.perf_counter()
        try:
            outputs = dict(fn())
        except (ConfigError, StageError):
            raise
        except Exception as exc:  # noqa: BLE001 - reported with the stage name
            self.save()
            raise StageError(name, exc) from exc
        wall = time.perf_counter() - start
        self.manifest.stages[name] = StageRecord(
            key,
            "ran",
            {n: {"path": self._rel(p), "sha256": file_digest(p)} for n, p in sorted(outputs.items())},
            round(wall, 3),
        )
        self.save()
        logger.info("stage %s: done in %.1f s", name, wall)
        return outputs

    def save(self) -> None:
        # keep records of stages not touched in this invocation (e.g. ablate after run)
        merged = RunManifest(
            self.manifest.tool,
            self.manifest.version,
            self.manifest.seed,
            self.manifest.config_digest,
            {**self.previous.inputs, **self.manifest.inputs},
            {**{k: v for k, v in self.previous.stages.items() if k not in self.manifest.stages}, **self.manifest.stages},
        )
        merged.save(self.manifest_path)


# ---------------------------------------------------------------------------
# data loading shared by stages


class DataCache:
    """Parsed inputs keyed by file digest, so each large file is read once per process."""

    def __init__(self):
        self._items = {}

    def _get(self, kind: str, path, loader):
        key = (kind, file_digest(path))
        if key not in self._items:
            self._items[key] = loader(path)
        return self._items[key]

    def streams(self, path):
        return self._get("streams", path, load_streams)

    def ground_truth(self, path, num_classes: int) -> dict:
        return self._get("gt", path, lambda p: gts_by_video(load_ground_truth(p, num_classes)))

    def split(self, path) -> dict:
        return self._get("split", path, lambda p: json.loads(Path(p).read_text()))


def _write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def _split_videos(split: Mapping, name: str) -> list:
    if name not in split:
        raise ConfigError(f"split manifest has no {name!r} entry")
    return list(split[name])


# ---------------------------------------------------------------------------
# stage bodies (also used directly by the single-stage subcommands)


def stage_synth(out_dir: Path, space: LabelSpace, synth_cfg: SynthConfig, features: bool = False) -> dict:
    return write_corpus(synth_cfg, space, out_dir, features=features)


def load_features(path, video_id: Optional[str] = None) -> dict:
    """Per-video feature matrices from ``.npz`` (one array per video) or ``.npy`` (one video)."""
    path = Path(path)
    if path.suffix == ".npy":
        if video_id is None:
            raise ValueError(".npy features hold one video; a video id is required")
        return {video_id: np.load(path)}
    with np.load(path) as data:
        return {k: data[k] for k in sorted(data.files)}


def stage_train_heads(
    features: Mapping[str, np.ndarray],
    gts: Mapping[str, GroundTruth],
    specs: list,
    train_videos: list,
    backbone: int,
    workers: int = 1,
) -> list:
    """Train every head on ``train_videos`` and predict all videos with features."""
    missing = [v for v in train_videos if v not in features or v not in gts]
    if missing:
        raise ValueError(f"training videos without features or labels: {missing[:5]}")
    x = np.concatenate([features[v] for v in train_videos])
    y = np.concatenate([gts[v].labels for v in train_videos])
    params = parallel_map(lambda spec: train_head(x, y, spec), specs, workers)
    out = []
    for p in params:
        logger.info("head b%d/m%d final loss %.4f", backbone, p.spec.model_id, p.final_loss or float("nan"))
        out.extend(predict_head(p, features[v], v, backbone) for v in sorted(features))
    return sorted(out, key=lambda s: (s.video_id, s.source))


def stage_fuse_weights(streams, gts, videos, fusion: Mapping) -> FusionWeights:
    val = split_streams(streams, videos)
    backbones = fusion.get("backbones")
    return fit_fusion_weights(
        val, gts, fusion.get("model_weighting", "ap"), fusion.get("backbone_weighting", "map"),
        None if backbones is None else tuple(int(b) for b in backbones),
    )


def stage_calibrate(streams, gts, videos, weights: FusionWeights, grid, objective: str = "f1", windows=None):
    fused = fuse_all(split_streams(streams, videos), weights, calibrated=False)
    temperature, scores = grid_search_temperature(fused, gts, grid, objective=objective, windows=windows)
    return FusionWeights(weights.alpha, weights.beta, temperature), scores


def stage_tune(streams, gts, videos, weights: FusionWeights, space: LabelSpace, tuning: Mapping, arm: str, workers: int = 1):
    fused = fuse_all(split_streams(streams, videos), weights, calibrated=True)
    base = arm_config(DecodeConfig.from_dict(tuning.get("base") or {}), decode_arm(arm))
    return tune_calibrated(
        fused,
        gts,
        space,
        weights.temperature,
        base,
        tuning.get("decode_grid"),
        tuning.get("objective", "mean"),
        float(tuning.get("delta0", 0.05)),
        int(tuning.get("max_iters", 50)),
        workers,
    )


def write_eval(report: dict, out_dir: Path, stem: str = "eval_report") -> dict:
    json_path = _write_json(out_dir / f"{stem}.json", report)
    text_path = out_dir / f"{stem}.txt"
    text_path.write_text(format_report(report))
    return {"report_json": json_path, "report_text": text_path}


def write_ablation(rows, out_dir: Path) -> dict:
    csv_path, text_path = out_dir / "ablation.csv", out_dir / "ablation.txt"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(ABLATION_HEADER)
        writer.writerows(ablation_records(rows))
    text_path.write_text(format_ablation(rows))
    return {"ablation_csv": csv_path, "ablation_text": text_path}


# ---------------------------------------------------------------------------
# pipeline


@dataclass
class Corpus:
    taxonomy: Path
    streams: Path
    ground_truth: Path
    split: Path
    gt_events: Optional[Path] = None
    features: dict = field(default_factory=dict)  # backbone -> path


def _prepare_corpus(cfg: dict, runner: StageRunner) -> Corpus:
    tax_path = Path(cfg["taxonomy"]) if cfg["taxonomy"] else default_taxonomy_path()
    runner.record_input("taxonomy", tax_path)
    if cfg["inputs"] is not None:
        inp = cfg["inputs"]
        for key in ("streams", "ground_truth", "split"):
            runner.record_input(key, inp[key])
        feats = {int(b): Path(p) for b, p in inp["features"].items()}
        for b, p in feats.items():
            runner.record_input(f"features_b{b}", p)
        return Corpus(tax_path, Path(inp["streams"]), Path(inp["ground_truth"]), Path(inp["split"]), features=feats)

    space = load_taxonomy(tax_path)
    synth_cfg = SynthConfig.from_dict(dict(cfg["synth"], seed=cfg["seed"]))
    want_features = bool(cfg["heads"]["enabled"])
    out = runner.run(
        "synth",
        {"taxonomy": tax_path},
        {"synth": synth_cfg.to_dict(), "features": want_features},
        lambda: stage_synth(runner.out / "corpus", space, synth_cfg, want_features),
    )
    feats = {int(k[len("features_b"):]): p for k, p in out.items() if k.startswith("features_b")}
    return Corpus(tax_path, out["streams"], out["ground_truth"], out["split"], out["gt_events"], feats)


def _head_specs(cfg: dict) -> list:
    specs = cfg["heads"]["specs"]
    if specs is None:
        return default_head_specs(cfg["seed"])
    if isinstance(specs, str):
        return load_head_specs(specs)
    return [HeadSpec(**s) for s in specs]


def run_pipeline(cfg: dict, out_dir, workers: int = 1, force: bool = False) -> dict:
    """Execute all stages in dependency order; returns the final output paths."""
    runner = StageRunner(out_dir, force)
    runner.manifest.seed = cfg["seed"]
    runner.manifest.config_digest = value_digest({k: v for k, v in cfg.items() if k != "workers"})
    data = DataCache()
    corpus = _prepare_corpus(cfg, runner)
    space = load_taxonomy(corpus.taxonomy)
    C = space.num_classes

    def gts():
        return data.ground_truth(corpus.ground_truth, C)

    def split():
        return data.split(corpus.split)

    streams_path = corpus.streams
    if cfg["heads"]["enabled"]:
        specs = _head_specs(cfg)
        heads_cfg = cfg["heads"]

        def train_all():
            out = []
            for b, fpath in sorted(corpus.features.items()):
                feats = load_features(fpath)
                out.extend(
                    stage_train_heads(feats, gts(), specs, _split_videos(split(), heads_cfg["split"]), b, workers)
                )
            path = runner.out / "heads" / "streams.jsonl"
            path.parent.mkdir(parents=True, exist_ok=True)
            save_streams(out, path)
            return {"streams": path}

        inputs = {"ground_truth": corpus.ground_truth, "split": corpus.split}
        inputs.update({f"features_b{b}": p for b, p in corpus.features.items()})
        params = {"specs": [spec_to_dict(s) for s in specs], "split": heads_cfg["split"]}
        streams_path = runner.run("train-heads", inputs, params, train_all)["streams"]

    base_inputs = {"streams": streams_path, "ground_truth": corpus.ground_truth, "split": corpus.split}
    fusion = cfg["fusion"]
    raw_weights = runner.run(
        "fuse-weights",
        base_inputs,
        fusion,
        lambda: {
            "weights": _save_weights(
                stage_fuse_weights(data.streams(streams_path), gts(), _split_videos(split(), fusion["split"]), fusion),
                runner.out / "fusion" / "weights_uncalibrated.json",
            )
        },
    )["weights"]

    arm, backbone = cfg["decode"]["arm"], cfg["decode"]["backbone"]
    cal = cfg["calibration"]
    windows = smoothing_windows(arm_config(DecodeConfig.from_dict(cfg["tuning"]["base"] or {}), decode_arm(arm)), space)

    def do_calibrate():
        w = apply_arm(FusionWeights.load(raw_weights), arm, backbone)
        w, scores = stage_calibrate(
            data.streams(streams_path), gts(), _split_videos(split(), fusion["split"]), w,
            cal["temperature_grid"], cal["objective"], windows,
        )
        return {
            "weights": _save_weights(w, runner.out / "fusion" / "weights.json"),
            "scores": _write_json(runner.out / "fusion" / "temperature_scores.json", scores),
        }

    weights_path = runner.run(
        "calibrate",
        {**base_inputs, "weights": raw_weights},
        {"calibration": cal, "arm": arm, "backbone": backbone, "split": fusion["split"], "windows": windows},
        do_calibrate,
    )["weights"]

    tuning = cfg["tuning"]

    def do_tune():
        report = stage_tune(
            data.streams(streams_path), gts(), _split_videos(split(), fusion["split"]),
            FusionWeights.load(weights_path), space, tuning, arm, workers,
        )
        path = runner.out / "tune" / "tune_report.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        report.save(path)
        return {"tune_report": path}

    report_path = runner.run(
        "tune",
        {**base_inputs, "weights": weights_path, "taxonomy": corpus.taxonomy},
        {"tuning": tuning, "arm": arm, "split": fusion["split"]},
        do_tune,
    )["tune_report"]

    dec = cfg["decode"]

    def do_decode():
        target = split_streams(data.streams(streams_path), _split_videos(split(), dec["split"]))
        events = decode_streams(target, FusionWeights.load(weights_path), TuneReport.load(report_path).decode_config(), space, workers)
        path = runner.out / "events.csv"
        save_events(events, path)
        return {"events": path}

    events_path = runner.run(
        "decode",
        {"streams": streams_path, "split": corpus.split, "weights": weights_path, "tune_report": report_path, "taxonomy": corpus.taxonomy},
        {"split": dec["split"]},
        do_decode,
    )["events"]

    ev_cfg = cfg["eval"]

    def do_eval():
        videos = _split_videos(split(), ev_cfg["split"])
        keep = set(videos)
        gt_events = [ev for v in videos if v in gts() for ev in ground_truth_events(gts()[v])]
        preds = [ev for ev in load_events(events_path) if ev.video_id in keep]
        return write_eval(evaluate(preds, gt_events, space, videos), runner.out)

    outputs = runner.run(
        "eval",
        {"events": events_path, "ground_truth": corpus.ground_truth, "split": corpus.split, "taxonomy": corpus.taxonomy},
        {"split": ev_cfg["split"]},
        do_eval,
    )
    return {"events": events_path, **outputs, "manifest": runner.manifest_path}


def _save_weights(weights: FusionWeights, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    weights.save(path)
    return path


def ablate(cfg: dict, out_dir, workers: int = 1, force: bool = False) -> dict:
    """Build (or reuse) the corpus, then fit and score every configured arm."""
    runner = StageRunner(out_dir, force)
    runner.manifest.seed = cfg["seed"]
    runner.manifest.config_digest = value_digest({k: v for k, v in cfg.items() if k != "workers"})
    data = DataCache()
    corpus = _prepare_corpus(cfg, runner)
    space = load_taxonomy(corpus.taxonomy)
    if cfg["heads"]["enabled"]:
        logger.warning("ablate uses the corpus head streams; heads.enabled is ignored")
    tuning, cal, abl = cfg["tuning"], cfg["calibration"], cfg["ablation"]
    options = TuningOptions(
        temperature_grid=tuple(cal["temperature_grid"]),
        decode_grid=tuning["decode_grid"],
        objective=tuning["objective"],
        delta0=float(tuning["delta0"]),
        max_iters=int(tuning["max_iters"]),
        temperature_objective=cal["objective"],
        base=DecodeConfig.from_dict(tuning["base"]),
    )
    def do_ablate():
        gts = data.ground_truth(corpus.ground_truth, space.num_classes)
        split = data.split(corpus.split)
        gt_events = [ev for v in sorted(gts) for ev in ground_truth_events(gts[v])]
        rows = run_ablation(
            data.streams(corpus.streams), gts, gt_events, split, space, options, abl["arms"], abl["split"], workers
        )
        return write_ablation(rows, runner.out)

    params = {"tuning": tuning, "calibration": cal, "ablation": abl}
    outputs = runner.run(
        "ablate",
        {"streams": corpus.streams, "ground_truth": corpus.ground_truth, "split": corpus.split, "taxonomy": corpus.taxonomy},
        params,
        do_ablate,
    )
    return outputs
