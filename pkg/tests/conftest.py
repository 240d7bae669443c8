import sys

import numpy as np
import pytest

from covloc import ExperimentConfig, TwinSystem


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def twin_system():
    return TwinSystem.build(ExperimentConfig(root_seed=0))


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if not mod or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    order = lambda k: (int(str(k)[0]), str(k))
    for key in sorted(mod.RESULTS, key=order):
        terminalreporter.write_line(mod.RESULTS[key])
