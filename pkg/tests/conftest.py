import numpy as np
import pytest

from vidadv.data import make_splits
from vidadv.models import ClassifierF


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_splits():
    """Four classes of 8x8x8 clips: enough for plumbing tests, fast to generate."""
    return make_splits(7, 4, n_train=6, n_val=2, n_test=3, T=8, H=8, W=8)


@pytest.fixture
def tiny_model(tiny_splits):
    return ClassifierF(4, widths=(4, 4, 8), seed=3)


@pytest.fixture
def clip_batch(tiny_splits):
    ds = tiny_splits["test"]
    return ds.clips[:6], ds.labels[:6]


SMALL_GEOMETRY = dict(K=10, n_train=60, n_val=10, n_test=20, T=8, H=16, W=16)


@pytest.fixture(scope="session")
def small_benign_factory():
    """Benign classifiers on 8x16x16 MovingShapes, trained once per seed and shared across modules."""
    from vidadv.training import TrainConfig, train_benign

    cache = {}

    def get(seed: int):
        if seed not in cache:
            splits = make_splits(seed, **SMALL_GEOMETRY)
            state = train_benign(TrainConfig(epochs=10, seed=seed), splits["train"], splits["val"])
            cache[seed] = (state.model, splits)
        return cache[seed]

    return get


@pytest.fixture(scope="session")
def benign_small(small_benign_factory):
    return small_benign_factory(0)


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion, with the measured values."""
    lines = []
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            if "test_acceptance.py" not in getattr(rep, "nodeid", "") or rep.when != "call" and outcome != "error":
                continue
            props = dict(getattr(rep, "user_properties", []))
            label = props.get("criterion", rep.nodeid.split("::")[-1])
            status = "PASS" if outcome == "passed" else "FAIL"
            lines.append((label, f"{status}  {label}: {props.get('measured', '')}".rstrip(": ")))
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, text in sorted(lines, key=lambda t: int(t[0].split()[0]) if t[0].split()[0].isdigit() else 99):
            terminalreporter.write_line(text)
