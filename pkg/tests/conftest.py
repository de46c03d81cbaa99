import numpy as np
import pytest

from capsule_events.streams import EventRecord
from capsule_events.synth import SynthConfig, generate_ground_truth, generate_predictions, split_manifest
from capsule_events.taxonomy import ClassInfo, LabelSpace, LandmarkRule, default_taxonomy


def make_space(regions=2, landmarks=(), pathologies=0):
    """Small label space: ``regions`` regions, then landmarks ``(name, valid, tol)``, then pathologies."""
    classes = [ClassInfo(i, f"r{i}", "region") for i in range(regions)]
    rules = {}
    for name, valid, tol in landmarks:
        cid = len(classes)
        classes.append(ClassInfo(cid, name, "landmark"))
        rules[cid] = LandmarkRule(frozenset(valid), tol)
    for k in range(pathologies):
        classes.append(ClassInfo(len(classes), f"p{k}", "pathology"))
    return LabelSpace(tuple(classes), tuple(range(regions)), rules)


def ev(start, end, score=1.0, video="v", cls=0):
    return EventRecord(video, cls, start, end, score)


@pytest.fixture(scope="session")
def space():
    return default_taxonomy()


@pytest.fixture(scope="session")
def corpus(space):
    """The default fixed-seed corpus, generated in memory."""
    cfg = SynthConfig()
    gts = generate_ground_truth(cfg, space)
    streams = generate_predictions(gts, cfg, space)
    return {"cfg": cfg, "gts": gts, "streams": streams, "split": split_manifest(cfg)}


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def staircase_instance():
    """One region class, 60 frames, GT [20, 40) and a two-step score profile inside it."""
    space = make_space(1)
    probs = np.full((60, 1), 0.399)
    probs[20:40, 0] = 0.5
    probs[22:38, 0] = 0.55
    labels = np.zeros((60, 1), dtype=np.uint8)
    labels[20:40, 0] = 1
    return space, probs, labels


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
