import numpy as np
import pytest

from pertforge import synthdata


@pytest.fixture(scope="session")
def tiny_dataset():
    spec = synthdata.DatasetSpec(seed=3, n_train=16, n_test=8, style="A")
    return synthdata.generate(spec).train


@pytest.fixture()
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    """Echo the acceptance-criteria verdicts, which pytest capture would
    otherwise swallow for passing tests."""
    try:
        from test_acceptance import VERDICTS
    except ImportError:
        return
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
