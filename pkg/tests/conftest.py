import numpy as np
import pytest

from m3net.data import SplitSpec, make_windows, synthetic_series
from m3net.model import ModelConfig


def tiny_config(**kw):
    base = dict(N=5, L=4, F=3, D_F=2, D_S=2, D_d=2, D_w=2, T_d=6, g=2, K=2,
                num_layers=1, seed=3, dtype="float64")
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_splits():
    series = synthetic_series(400, 4, seed=5)
    return make_windows(series, 12, 12, split=SplitSpec(0.6, 0.2, 0.2))


ACCEPTANCE = []     # (number, title, passed, detail), filled by test_acceptance


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  [{number}] {title}: {detail}")
