import numpy as np
import pytest

from voxprune.checks import jittered_params
from voxprune.modelio import PipelineConfig
from voxprune.pipeline import Model

_ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def small_config():
    return PipelineConfig(channels=(4, 8), units=(1, 1, 1, 1), num_classes=4)


@pytest.fixture(scope="session")
def small_model(small_config):
    return Model.from_params(jittered_params(small_config, 0), small_config)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def report():
    """Record one PASS/FAIL line for an acceptance criterion."""
    def _report(name, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
        _ACCEPTANCE_LINES.append(line)
        print(line)
        return ok
    return _report


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
