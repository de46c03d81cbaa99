import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from capsule_events.streams import (
    FUSED,
    FUSED_TTA,
    EventRecord,
    GroundTruth,
    ProbStream,
    StreamError,
    average_streams,
    check_events,
    check_ground_truth,
    ground_truth_events,
    load_events,
    load_ground_truth,
    load_streams,
    save_events,
    save_ground_truth,
    save_streams,
    segments,
)

from conftest import make_space


def write_jsonl(path, records):
    path.write_text("".join(json.dumps(r) + "\n" for r in records))
    return path


def test_two_frame_fixture(tmp_path):
    recs = [
        {"video_id": "v", "backbone_id": 0, "model_id": 1, "frame_index": t, "probs": [0.1 * t, 0.5, 0.9]}
        for t in range(2)
    ]
    (s,) = load_streams(write_jsonl(tmp_path / "s.jsonl", recs))
    assert s.video_id == "v" and s.source == (0, 1)
    assert s.probs.shape == (2, 3)
    np.testing.assert_allclose(s.probs[1], [0.1, 0.5, 0.9])


def test_out_of_range_probability_reports_line(tmp_path):
    recs = [
        {"video_id": "v", "backbone_id": 0, "model_id": 0, "frame_index": 0, "probs": [0.2]},
        {"video_id": "v", "backbone_id": 0, "model_id": 0, "frame_index": 1, "probs": [1.5]},
    ]
    with pytest.raises(StreamError, match=r":2: probability outside"):
        load_streams(write_jsonl(tmp_path / "s.jsonl", recs))


def test_length_mismatch_across_sources(tmp_path):
    recs = [{"video_id": "v", "backbone_id": 0, "model_id": 0, "frame_index": t, "probs": [0.5]} for t in range(10)]
    recs += [{"video_id": "v", "backbone_id": 1, "model_id": 0, "frame_index": t, "probs": [0.5]} for t in range(11)]
    with pytest.raises(StreamError, match="disagree on length"):
        load_streams(write_jsonl(tmp_path / "s.jsonl", recs))


def test_malformed_line(tmp_path):
    p = tmp_path / "s.jsonl"
    p.write_text('{"video_id": "v", "backbone_id": 0, "model_id": 0, "frame_index": 0, "probs": [0.5]}\n{not json\n')
    with pytest.raises(StreamError, match=r":2: malformed"):
        load_streams(p)


def test_duplicate_and_missing_frames(tmp_path):
    recs = [{"video_id": "v", "backbone_id": 0, "model_id": 0, "frame_index": t, "probs": [0.5]} for t in (0, 0)]
    with pytest.raises(StreamError, match="frame_index"):
        load_streams(write_jsonl(tmp_path / "a.jsonl", recs))
    recs = [{"video_id": "v", "backbone_id": 0, "model_id": 0, "frame_index": t, "probs": [0.5]} for t in (0, 2)]
    with pytest.raises(StreamError, match="frame_index"):
        load_streams(write_jsonl(tmp_path / "b.jsonl", recs))


def test_class_count_mismatch(tmp_path):
    recs = [
        {"video_id": "v", "backbone_id": 0, "model_id": 0, "frame_index": 0, "probs": [0.5, 0.5]},
        {"video_id": "v", "backbone_id": 1, "model_id": 0, "frame_index": 0, "probs": [0.5]},
    ]
    with pytest.raises(StreamError, match="classes"):
        load_streams(write_jsonl(tmp_path / "s.jsonl", recs))


def test_no_silent_clamping():
    with pytest.raises(StreamError):
        ProbStream("v", (0, 0), np.array([[1.0000001]]))
    with pytest.raises(StreamError):
        ProbStream("v", (0, 0), np.array([[np.nan]]))


def test_stream_round_trip(tmp_path, rng):
    streams = [
        ProbStream("b", (1, 0), rng.random((4, 3))),
        ProbStream("a", (0, 2), rng.random((5, 3))),
        ProbStream("a", FUSED, rng.random((5, 3))),
    ]
    p = tmp_path / "s.jsonl"
    save_streams(streams, p)
    back = load_streams(p)
    assert [(s.video_id, s.source) for s in back] == [("a", (0, 2)), ("a", FUSED), ("b", (1, 0))]
    np.testing.assert_allclose(back[0].probs, streams[1].probs, rtol=1e-5)


def test_streams_are_read_only(rng):
    s = ProbStream("v", (0, 0), rng.random((3, 2)))
    with pytest.raises(ValueError):
        s.probs[0, 0] = 0.5


def test_average_examples():
    a = ProbStream("v", (0, 0), np.array([[0.2]]))
    b = ProbStream("v", (1, 0), np.array([[0.6]]))
    out = average_streams(a, b)
    assert out.source == FUSED_TTA
    assert out.probs[0, 0] == pytest.approx(0.4)
    np.testing.assert_array_equal(average_streams(a, a).probs, a.probs)
    with pytest.raises(StreamError):
        average_streams(a, ProbStream("v", (1, 0), np.array([[0.6], [0.1]])))


@settings(max_examples=60, deadline=None)
@given(
    arrays(np.float64, (6, 3), elements=st.floats(0, 1)),
    arrays(np.float64, (6, 3), elements=st.floats(0, 1)),
)
def test_average_commutative_and_bounded(x, y):
    a, b = ProbStream("v", (0, 0), x), ProbStream("v", (1, 0), y)
    ab, ba = average_streams(a, b).probs, average_streams(b, a).probs
    np.testing.assert_array_equal(ab, ba)
    assert np.all(ab >= np.minimum(x, y)) and np.all(ab <= np.maximum(x, y))
    assert np.all((ab >= 0) & (ab <= 1))


def test_event_record_validation():
    with pytest.raises(StreamError):
        EventRecord("v", 0, 5, 5)
    with pytest.raises(StreamError):
        EventRecord("v", 0, -1, 3)
    with pytest.raises(StreamError):
        EventRecord("v", 0, 0, 3, 1.2)


def test_check_events():
    check_events([EventRecord("v", 0, 0, 3), EventRecord("v", 0, 3, 5)], {"v": 5})
    with pytest.raises(StreamError):
        check_events([EventRecord("v", 0, 0, 3), EventRecord("v", 0, 2, 5)])
    with pytest.raises(StreamError):
        check_events([EventRecord("v", 0, 4, 9)], {"v": 5})


def test_ground_truth_round_trip_and_events(tmp_path):
    labels = np.zeros((6, 3), dtype=np.uint8)
    labels[:3, 0] = 1
    labels[3:, 1] = 1
    labels[1:3, 2] = 1
    labels[4, 2] = 1
    gt = GroundTruth("v", labels)
    p = tmp_path / "gt.jsonl"
    save_ground_truth([gt], p)
    (back,) = load_ground_truth(p, 3)
    np.testing.assert_array_equal(back.labels, labels)
    evs = ground_truth_events(gt)
    assert [(e.class_id, e.start_frame, e.end_frame) for e in evs] == [(0, 0, 3), (1, 3, 6), (2, 1, 3), (2, 4, 5)]
    check_ground_truth(gt, make_space(2, pathologies=1))


def test_two_regions_in_one_frame_rejected():
    labels = np.array([[1, 1, 0]])
    with pytest.raises(StreamError):
        check_ground_truth(GroundTruth("v", labels), make_space(2, pathologies=1))


def test_events_csv_round_trip(tmp_path):
    evs = [EventRecord("v", 1, 0, 4, 0.25), EventRecord("w", 0, 2, 3, 0.123456789)]
    p = tmp_path / "e.csv"
    save_events(evs, p)
    assert p.read_text().splitlines()[0] == "video_id,class_id,start_frame,end_frame,score"
    back = load_events(p)
    assert back[0] == evs[0]
    assert back[1].score == pytest.approx(0.123457)


def test_segments():
    assert segments(np.array([0, 1, 1, 0, 1, 1, 1, 0])) == [(1, 3), (4, 7)]
    assert segments(np.zeros(4)) == []
    assert segments(np.ones(3)) == [(0, 3)]
