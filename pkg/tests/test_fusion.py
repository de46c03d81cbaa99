import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from capsule_events.fusion import (
    FusionError,
    FusionWeights,
    calibrate,
    calibrate_probs,
    compute_backbone_weights,
    compute_model_weights,
    fit_fusion_weights,
    fuse_backbones,
    fuse_models,
    fuse_video,
    head_aps,
    logit,
    uniform_model_weights,
)
from capsule_events.streams import FUSED, GroundTruth, ProbStream


def head_streams(rng, video="v", backbones=2, models=3, frames=20, classes=4):
    return [
        ProbStream(video, (b, m), rng.random((frames, classes))) for b in range(backbones) for m in range(models)
    ]


def test_model_weights_examples():
    alpha = compute_model_weights({(0, 0, 0): 0.2, (0, 1, 0): 0.3, (0, 2, 0): 0.5})
    np.testing.assert_allclose([alpha[0][m][0] for m in range(3)], [0.2, 0.3, 0.5])
    alpha = compute_model_weights({(0, m, 0): 0.7 for m in range(5)})
    np.testing.assert_allclose([alpha[0][m][0] for m in range(5)], [0.2] * 5)
    alpha = compute_model_weights({(0, m, 0): 0.0 for m in range(5)})
    np.testing.assert_allclose([alpha[0][m][0] for m in range(5)], [0.2] * 5)


def test_model_weights_absent_ap_counts_as_zero():
    alpha = compute_model_weights({(0, 0, 0): None, (0, 1, 0): 0.4, (0, 0, 1): None, (0, 1, 1): None})
    assert alpha[0][0][0] == 0.0 and alpha[0][1][0] == 1.0
    assert alpha[0][0][1] == 0.5 and alpha[0][1][1] == 0.5


def test_model_weights_negative_ap():
    with pytest.raises(FusionError):
        compute_model_weights({(0, 0, 0): -0.1})


def test_backbone_weights_examples():
    beta = compute_backbone_weights({0: 0.6, 1: 0.4})
    assert beta[0] == pytest.approx(0.6) and beta[1] == pytest.approx(0.4)
    assert compute_backbone_weights({3: 0.2}) == {3: 1.0}
    assert compute_backbone_weights({0: 0.3, 1: 0.3}) == {0: 0.5, 1: 0.5}
    assert compute_backbone_weights({0: 0.0, 1: 0.0}) == {0: 0.5, 1: 0.5}
    with pytest.raises(FusionError):
        compute_backbone_weights({0: -0.1, 1: 0.5})
    with pytest.raises(FusionError):
        compute_backbone_weights({})


def test_fuse_models_examples():
    one = ProbStream("v", (0, 0), np.array([[0.3, 0.9]]))
    np.testing.assert_allclose(fuse_models([one], {0: np.ones(2)}).probs, one.probs)
    a = ProbStream("v", (0, 0), np.array([[0.2]]))
    b = ProbStream("v", (0, 1), np.array([[0.6]]))
    out = fuse_models([a, b], {0: np.array([0.5]), 1: np.array([0.5])})
    assert out.probs[0, 0] == pytest.approx(0.4)
    assert out.source == (0, None)
    with pytest.raises(FusionError):
        fuse_models([a], {0: np.array([0.5]), 1: np.array([0.5])})


def test_fuse_backbones_examples():
    a = ProbStream("v", (0, None), np.array([[0.8]]))
    b = ProbStream("v", (1, None), np.array([[0.2]]))
    np.testing.assert_allclose(fuse_backbones([a, b], {0: 1.0, 1: 0.0}).probs, a.probs)
    out = fuse_backbones([a, b], {0: 0.75, 1: 0.25})
    assert out.probs[0, 0] == pytest.approx(0.65)
    assert out.source == FUSED


def test_calibration_examples():
    assert calibrate_probs(np.array([0.8]), 2.0)[0] == pytest.approx(2 / 3, abs=1e-12)
    for t in (0.3, 1.0, 7.0):
        assert calibrate_probs(np.array([0.5]), t)[0] == pytest.approx(0.5, abs=1e-15)
    p = np.linspace(1e-5, 1 - 1e-5, 1001)
    np.testing.assert_allclose(calibrate_probs(p, 1.0), p, atol=1e-9, rtol=0)
    for bad in (0.0, -1.0, math.inf, math.nan):
        with pytest.raises(FusionError):
            calibrate_probs(p, bad)


def test_calibration_clamps_saturated_values():
    out = calibrate_probs(np.array([0.0, 1.0]), 2.0)
    assert np.all(np.isfinite(out))
    assert out[0] > 0 and out[1] < 1
    assert logit(np.array([0.0]))[0] == pytest.approx(math.log(1e-6 / (1 - 1e-6)))


def _pairwise_sign(row):
    return np.sign(row[:, None] - row[None, :])


@settings(max_examples=50, deadline=None)
@given(
    arrays(np.int64, (5, 6), elements=st.integers(1, 9999)),
    st.sampled_from([0.5, 2.0, 5.0]),
)
def test_calibration_preserves_ranking(grid, t):
    p = grid / 10000.0
    q = calibrate_probs(p, t)
    for row_p, row_q in zip(p, q):
        assert np.array_equal(_pairwise_sign(row_p), _pairwise_sign(row_q))
        assert np.array_equal(np.argsort(row_p, kind="stable"), np.argsort(row_q, kind="stable"))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (4, 6), elements=st.floats(0, 1)), st.floats(0.05, 20))
def test_calibration_never_reverses_order(p, t):
    # at float resolution two close inputs may collapse to one value, but never swap
    q = calibrate_probs(p, t)
    for row_p, row_q in zip(p, q):
        assert np.all(_pairwise_sign(row_p) * _pairwise_sign(row_q) >= 0)


def test_calibrate_stream_keeps_identity(rng):
    s = ProbStream("v", FUSED, rng.random((4, 3)))
    out = calibrate(s, 1.5)
    assert out.video_id == "v" and out.source == FUSED


def naive_mean(streams):
    """Plain average of every head stream of a video, computed entry by entry."""
    frames, classes = streams[0].probs.shape
    out = np.zeros((frames, classes))
    for t in range(frames):
        for c in range(classes):
            out[t, c] = sum(s.probs[t, c] for s in streams) / len(streams)
    return out


def test_uniform_fusion_is_plain_mean(rng):
    streams = head_streams(rng, backbones=2, models=5)
    alpha = uniform_model_weights({0: range(5), 1: range(5)}, 4)
    w = FusionWeights(alpha, {0: 0.5, 1: 0.5}, 1.0)
    fused = fuse_video(streams, w, calibrated=False)
    np.testing.assert_allclose(fused.probs, naive_mean(streams), atol=1e-12, rtol=0)


@pytest.mark.parametrize("seed", range(10))
def test_random_weight_configs(seed):
    rng = np.random.default_rng(seed)
    B, M, C = 2, int(rng.integers(1, 6)), 4
    aps = {(b, m, c): float(rng.random()) if rng.random() > 0.2 else None for b in range(B) for m in range(M) for c in range(C)}
    alpha = compute_model_weights(aps)
    beta = compute_backbone_weights({b: float(rng.random()) for b in range(B)})
    w = FusionWeights(alpha, beta, 1.0)
    w.validate(tol=1e-9)
    for b in range(B):
        sums = np.sum([alpha[b][m] for m in range(M)], axis=0)
        np.testing.assert_allclose(sums, 1.0, atol=1e-9, rtol=0)
    assert abs(sum(beta.values()) - 1.0) <= 1e-9
    streams = head_streams(rng, backbones=B, models=M, classes=C)
    fused = fuse_video(streams, w, calibrated=False).probs
    stack = np.stack([s.probs for s in streams])
    assert np.all(fused >= stack.min(axis=0) - 1e-12)
    assert np.all(fused <= stack.max(axis=0) + 1e-12)


def test_weights_validation():
    with pytest.raises(FusionError):
        FusionWeights({0: {0: np.array([0.7]), 1: np.array([0.4])}}, {0: 1.0}).validate()
    with pytest.raises(FusionError):
        FusionWeights({0: {0: np.array([1.0])}}, {0: 0.6, 1: 0.5}).validate()
    with pytest.raises(FusionError):
        FusionWeights({0: {0: np.array([1.0])}}, {0: 1.0}, temperature=0.0).validate()


def test_weights_json_round_trip(tmp_path, rng):
    alpha = compute_model_weights({(b, m, c): float(rng.random()) for b in range(2) for m in range(3) for c in range(4)})
    w = FusionWeights(alpha, {0: 0.25, 1: 0.75}, 1.5)
    p = tmp_path / "w.json"
    w.save(p)
    back = FusionWeights.load(p)
    assert back.beta == w.beta and back.temperature == 1.5
    for b in alpha:
        for m in alpha[b]:
            np.testing.assert_array_equal(back.alpha[b][m], alpha[b][m])


def test_fit_fusion_weights_prefers_informative_heads():
    rng = np.random.default_rng(0)
    labels = (rng.random((400, 2)) < 0.3).astype(np.uint8)
    good = np.clip(labels * 0.8 + rng.random((400, 2)) * 0.2, 0, 1)
    bad = rng.random((400, 2))
    streams = [ProbStream("v", (0, 0), good), ProbStream("v", (0, 1), bad), ProbStream("v", (1, 0), bad)]
    gts = {"v": GroundTruth("v", labels)}
    aps = head_aps(streams, gts)
    assert aps[(0, 0, 0)] == 1.0
    w = fit_fusion_weights(streams, gts)
    assert np.all(w.alpha[0][0] > w.alpha[0][1])
    assert w.beta[0] > w.beta[1]
    uni = fit_fusion_weights(streams, gts, "uniform", "uniform")
    np.testing.assert_allclose(uni.alpha[0][0], 0.5)
    assert uni.beta == {0: 0.5, 1: 0.5}
    single = fit_fusion_weights(streams, gts, backbones=[1])
    assert single.beta == {1: 1.0} and list(single.alpha) == [1]
    with pytest.raises(FusionError):
        fit_fusion_weights(streams, gts, model_weighting="median")
