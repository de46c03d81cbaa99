"""Acceptance criteria, one test per criterion.

Each test records a ``criterion NN PASS|FAIL`` line; the lines are printed
in the terminal summary of every pytest run. Run this module on its own with
``pytest tests/test_acceptance.py`` or ``python tests/test_acceptance.py``.
"""
import logging
import math
import sys

import numpy as np
import pytest

from capsule_events.cli import main as cli_main
from capsule_events.decode import DecodeConfig, arm_config, decode_ated, decode_video
from capsule_events.fusion import (
    FusionWeights,
    calibrate_probs,
    compute_backbone_weights,
    compute_model_weights,
    fuse_video,
    uniform_model_weights,
)
from capsule_events.heads import HeadSpec, loss_value_and_gradient
from capsule_events.metrics import average_video_maps, greedy_match, oracle_match, temporal_map
from capsule_events.pipeline import fit_arm, get_arm, gts_by_video, run_ablation, split_streams
from capsule_events.streams import FUSED, EventRecord, GroundTruth, ProbStream, check_events, ground_truth_events
from capsule_events.synth import SynthConfig, generate_ground_truth, generate_predictions, region_ranks, split_manifest
from capsule_events.tuning import ValidationSet, local_search_thresholds, tune_calibrated

from conftest import ACCEPTANCE_LINES, staircase_instance

logger = logging.getLogger(__name__)


def verdict(number, title, ok, detail=""):
    line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}: {title}" + (f" [{detail}]" if detail else "")
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


@pytest.fixture(scope="module")
def default_corpus(space):
    cfg = SynthConfig()
    gts = generate_ground_truth(cfg, space)
    return cfg, gts, generate_predictions(gts, cfg, space)


# ---------------------------------------------------------------------------


def test_criterion_01_per_video_averaging():
    a = average_video_maps([0.4706, 0.2356, 0.3529])
    b = average_video_maps([0.4412, 0.1765, 0.3529])
    ok = abs(a - 0.3530) <= 5e-5 and abs(b - 0.3235) <= 5e-5
    verdict(1, "per-video tmAP averaging", ok, f"{a:.5f} vs 0.3530, {b:.5f} vs 0.3235")


def test_criterion_02_greedy_vs_oracle():
    rng = np.random.default_rng(2024)
    n, agree, discrepancies = 2000, 0, []
    for k in range(n):
        npred, ngt = int(rng.integers(0, 7)), int(rng.integers(0, 7))

        def interval():
            s = int(rng.integers(0, 60))
            return s, s + int(rng.integers(1, 20))

        scores = rng.permutation(np.linspace(0.05, 0.95, npred)) if npred else []
        preds = [EventRecord("v", 0, *interval(), float(sc)) for sc in scores]
        gts = [EventRecord("v", 0, *interval()) for _ in range(ngt)]
        ranked = sorted(preds, key=lambda e: (-e.score, e.start_frame))
        greedy = int(greedy_match(ranked, gts, 0.5).sum())
        best = oracle_match(preds, gts, 0.5)
        if greedy == best:
            agree += 1
        else:
            discrepancies.append((k, greedy, best))
            logger.info("instance %d: greedy %d, oracle %d, preds %s, gts %s", k, greedy, best,
                        [(e.start_frame, e.end_frame, e.score) for e in preds], [(e.start_frame, e.end_frame) for e in gts])
    rate = agree / n
    never_more = all(g <= o for _, g, o in discrepancies)
    verdict(2, "greedy TP count equals oracle", rate >= 0.99 and never_more,
            f"{rate:.2%} of {n} agree, {len(discrepancies)} discrepancies, greedy<=oracle in all: {never_more}")


def test_criterion_03_fusion_algebra():
    failures = []
    for seed in range(10):
        rng = np.random.default_rng(seed)
        B, M, C = 2, int(rng.integers(1, 6)), 5
        aps = {(b, m, c): float(rng.random()) for b in range(B) for m in range(M) for c in range(C)}
        alpha = compute_model_weights(aps)
        beta = compute_backbone_weights({b: float(rng.random()) for b in range(B)})
        for b in range(B):
            if np.max(np.abs(np.sum([alpha[b][m] for m in range(M)], axis=0) - 1)) > 1e-9:
                failures.append(f"seed {seed}: alpha sum")
        if abs(sum(beta.values()) - 1) > 1e-9:
            failures.append(f"seed {seed}: beta sum")
        streams = [ProbStream("v", (b, m), rng.random((40, C))) for b in range(B) for m in range(M)]
        stack = np.stack([s.probs for s in streams])
        fused = fuse_video(streams, FusionWeights(alpha, beta), calibrated=False).probs
        if np.any(fused < stack.min(axis=0) - 1e-12) or np.any(fused > stack.max(axis=0) + 1e-12):
            failures.append(f"seed {seed}: outside source range")
        uni = fuse_video(streams, FusionWeights(uniform_model_weights({b: range(M) for b in range(B)}, C), {b: 1 / B for b in range(B)}), calibrated=False).probs
        naive = np.zeros_like(uni)
        for t in range(uni.shape[0]):
            for c in range(C):
                naive[t, c] = sum(s.probs[t, c] for s in streams) / len(streams)
        if np.max(np.abs(uni - naive)) > 1e-12:
            failures.append(f"seed {seed}: uniform fusion vs naive mean")
    verdict(3, "fusion weight sums, convexity, uniform = naive mean", not failures, "; ".join(failures) or "10 configs")


def test_criterion_04_calibration():
    p = np.linspace(1e-5, 1 - 1e-5, 100_001)
    identity_err = float(np.max(np.abs(calibrate_probs(p, 1.0) - p)))
    example_err = abs(calibrate_probs(np.array([0.8]), 2.0)[0] - 2 / 3)
    rng = np.random.default_rng(4)
    rank_ok = True
    for t in (0.5, 2.0, 5.0):
        grid = rng.choice(np.arange(1, 10_000), size=(500, 14), replace=True) / 10_000
        cal = calibrate_probs(grid, t)
        for row_p, row_q in zip(grid, cal):
            if not np.array_equal(np.argsort(row_p, kind="stable"), np.argsort(row_q, kind="stable")):
                rank_ok = False
    ok = identity_err <= 1e-9 and example_err <= 1e-12 and rank_ok
    verdict(4, "calibration identity, worked example, ranking", ok,
            f"identity err {identity_err:.1e}, example err {example_err:.1e}, ranking preserved {rank_ok}")


@pytest.mark.slow
def test_criterion_05_decode_invariants(default_corpus, space):
    cfg, gts, streams = default_corpus
    split = split_manifest(cfg)
    by_video = gts_by_video(gts)
    weights, report = fit_arm(get_arm("full"), split_streams(streams, split["val"]), by_video, space, workers=4)
    dcfg = report.decode_config()
    fused = {}
    for s in streams:
        fused.setdefault(s.video_id, []).append(s)
    violations = []
    n_events = 0
    for vid, group in sorted(fused.items()):
        stream = fuse_video(group, weights)
        res = decode_video(stream, space, dcfg)
        tl = res.timeline
        if not np.all(tl[:, space.regions].sum(axis=1) == 1):
            violations.append(f"{vid}: region exclusivity")
        if np.any(np.diff(region_ranks(tl.astype(np.uint8), space)) < 0):
            violations.append(f"{vid}: rank order")
        for e in res.events:
            rule = space.landmark_rules.get(e.class_id)
            if rule is None:
                continue
            lo, hi = max(0, e.start_frame - rule.tolerance_frames), e.end_frame + rule.tolerance_frames
            if not np.isin(res.assignment[lo:hi], sorted(rule.valid_regions)).any():
                violations.append(f"{vid}: landmark {e.class_id} at {e.start_frame}")
        try:
            check_events(res.events, {vid: stream.num_frames})
        except ValueError as exc:
            violations.append(f"{vid}: {exc}")
        n_events += len(res.events)
    verdict(5, "decode invariants on the default corpus", not violations,
            "; ".join(violations[:5]) or f"{len(fused)} videos, {n_events} events, 0 violations")


def test_criterion_06_lossless_round_trip(space):
    cfg = SynthConfig().noise_free()
    gts = generate_ground_truth(cfg, space)
    streams = generate_predictions(gts, cfg, space)
    grouped = {}
    for s in streams:
        grouped.setdefault(s.video_id, []).append(s)
    dcfg = DecodeConfig(windows={"region": 1, "landmark": 1, "pathology": 1}, thresholds=(0.5,) * space.num_classes)
    preds = []
    for vid, group in sorted(grouped.items()):
        mean = ProbStream(vid, FUSED, np.mean([s.probs for s in group], axis=0))
        preds.extend(decode_ated(mean, space, dcfg))
    gt_events = [e for g in gts for e in ground_truth_events(g)]
    exact = [(e.video_id, e.class_id, e.start_frame, e.end_frame) for e in preds] == [
        (e.video_id, e.class_id, e.start_frame, e.end_frame) for e in gt_events
    ]
    m50 = temporal_map(preds, gt_events, 0.5).overall
    m95 = temporal_map(preds, gt_events, 0.95).overall
    verdict(6, "noise-free streams decode to GT", exact and m50 == 1.0 and m95 == 1.0,
            f"exact events {exact}, tmAP@0.5 {m50}, tmAP@0.95 {m95}")


@pytest.mark.slow
def test_criterion_07_ablation_directions(default_corpus, space):
    cfg, gts, streams = default_corpus
    gt_events = [e for g in gts for e in ground_truth_events(g)]
    rows = {r.arm.name: r for r in run_ablation(streams, gts_by_video(gts), gt_events, split_manifest(cfg), space, workers=4)}
    full = rows["full"]
    checks = {
        "full > per-label-only @0.5": full.map50 > rows["per-label-only"].map50,
        "per-label >= tuple-based @0.5": full.map50 >= rows["tuple-based"].map50,
        "weighted >= uniform fusion @0.95": full.map95 >= rows["uniform-fusion"].map95,
        "fused >= best single backbone @0.5": full.map50 >= max(rows["single-backbone-0"].map50, rows["single-backbone-1"].map50),
    }
    table = ", ".join(f"{k} {r.map50:.4f}/{r.map95:.4f}" for k, r in rows.items())
    failed = [k for k, ok in checks.items() if not ok]
    verdict(7, "ablation directions on seed 0", not failed, ("failed: " + "; ".join(failed) + "; " if failed else "") + table)


def test_criterion_08_tuning_contracts(space):
    monotone = []
    for seed in range(5):
        cfg = SynthConfig(seed=seed, n_train=0, n_val=3, n_test=0, frames=(800, 1200))
        gts = generate_ground_truth(cfg, space)
        streams = generate_predictions(gts, cfg, space)
        fused = [
            ProbStream(g.video_id, FUSED, np.mean([s.probs for s in streams if s.video_id == g.video_id], axis=0))
            for g in gts
        ]
        report = tune_calibrated(fused, gts_by_video(gts), space, decode_grid={}, max_iters=15)
        values = [v for _, v in report.trace]
        monotone.append(all(b >= a for a, b in zip(values, values[1:])))

    one_space, probs, labels = staircase_instance()
    val = ValidationSet([ProbStream("v", FUSED, probs)], {"v": GroundTruth("v", labels)}, one_space)
    dcfg = arm_config(DecodeConfig(), "per-label-only")

    def evaluate(theta):
        return val.score(dcfg.with_thresholds(theta), "mean")

    theta, trace = local_search_thresholds([0.6], evaluate)
    sweep = max(evaluate([t]) for t in np.arange(0.005, 1.0, 0.005))
    found = evaluate(theta)
    ok = all(monotone) and math.isclose(found, sweep) and trace[0][1] == 0.0 and 0.4 <= theta[0] <= 0.5
    verdict(8, "local search trace monotone, matches exhaustive sweep", ok,
            f"monotone traces {sum(monotone)}/5, search {found:.4f} at theta {theta[0]:.3f}, sweep {sweep:.4f}")


def test_criterion_09_loss_gradients():
    specs = [
        HeadSpec(loss="bce"),
        HeadSpec(loss="focal", gamma=2.0),
        HeadSpec(loss="asymmetric", gamma_pos=0.0, gamma_neg=4.0, clip=0.05),
    ]
    rng = np.random.default_rng(9)
    worst = {}
    for spec in specs:
        w = 0.0
        for _ in range(200):
            z, y = float(rng.uniform(-6, 6)), float(rng.integers(0, 2))
            pw = [float(rng.uniform(1, 5))] if spec.loss == "bce" else None
            analytic = float(loss_value_and_gradient(spec, [z], [y], pw)[1][0])
            hi = loss_value_and_gradient(spec, [z + 1e-5], [y], pw)[0]
            lo = loss_value_and_gradient(spec, [z - 1e-5], [y], pw)[0]
            numeric = (hi - lo) / 2e-5
            w = max(w, abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-12))
        worst[spec.loss] = w
    z = rng.uniform(-8, 8, 500)
    y = rng.integers(0, 2, 500).astype(float)
    bce = loss_value_and_gradient(HeadSpec(loss="bce"), z, y)
    focal = loss_value_and_gradient(HeadSpec(loss="focal", gamma=0.0), z, y)
    asym = loss_value_and_gradient(HeadSpec(loss="asymmetric", gamma_pos=0, gamma_neg=0, clip=0), z, y)
    ident = max(abs(focal[0] - bce[0]), abs(asym[0] - bce[0]),
                float(np.max(np.abs(focal[1] - bce[1]))), float(np.max(np.abs(asym[1] - bce[1]))))
    ok = max(worst.values()) < 1e-4 and ident <= 1e-12
    verdict(9, "loss gradients and reduction identities", ok,
            ", ".join(f"{k} rel err {v:.1e}" for k, v in worst.items()) + f", identity gap {ident:.1e}")


@pytest.mark.slow
def test_criterion_10_determinism(tmp_path):
    outs = {}
    for workers in (1, 8):
        out = tmp_path / f"w{workers}"
        assert cli_main(["run", "--out", str(out), "--workers", str(workers)]) == 0
        outs[workers] = out
    same = {
        name: (outs[1] / name).read_bytes() == (outs[8] / name).read_bytes()
        for name in ("events.csv", "eval_report.json", "eval_report.txt")
    }
    verdict(10, "run output identical for 1 and 8 workers", all(same.values()),
            ", ".join(f"{k} {'identical' if v else 'DIFFERS'}" for k, v in same.items()))


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))
