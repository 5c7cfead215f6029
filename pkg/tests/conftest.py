import numpy as np
import pytest

from ampattn.data import SynthConfig, assign_folds, build_features, generate_synthetic

# filled by tests/test_acceptance.py; one entry per criterion
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, line = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {line}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_corpus():
    """12 synthetic utterances over 3 classes, folds assigned for k=3."""
    ds, waves, peaks = generate_synthetic(SynthConfig(n_classes=3, per_class=4, seed=3))
    ds = assign_folds(ds, 3, 0)
    return ds, waves, peaks, build_features(ds, waves)
