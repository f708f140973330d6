import numpy as np
import pytest

from refquery import tensor as T
from refquery.data import SyntheticSpec, generate_synthetic
from refquery.model import ModelConfig


def small_spec(**kw):
    base = dict(seed=0, T=3, base=(32, 32), channels=(8, 8, 8), C_t=8, N_t=4,
                num_objects=2, radius=(4.0, 7.0))
    base.update(kw)
    return SyntheticSpec(**base)


def small_model_config(**kw):
    base = dict(C=8, heads=2, encoder_layers=1, frame_layers=1, video_layers=1, N_f=4, N_v=4,
                in_channels=[8, 8, 8], text_channels=8)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def clip():
    return generate_synthetic(small_spec())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def float64():
    with T.using_dtype(np.float64):
        yield


CRITERIA: list[str] = []


@pytest.fixture
def criterion(capsys):
    """Record one acceptance line: PASS/FAIL, name, observed value."""
    def record(name: str, passed: bool, observed: str):
        line = f"{'PASS' if passed else 'FAIL'}  {name}: {observed}"
        CRITERIA.append(line)
        with capsys.disabled():
            print(f"\n    {line}")
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in CRITERIA:
            terminalreporter.write_line(line)
