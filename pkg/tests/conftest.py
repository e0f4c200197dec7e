import numpy as np
import pytest

from genmvi.phantom import PhantomConfig, generate_subject
from genmvi.pipeline import prepare_subject


@pytest.fixture(scope="session")
def phantom_cfg():
    return PhantomConfig.default()


@pytest.fixture(scope="session")
def cohort(phantom_cfg):
    """The eight default phantom subjects with their ground truth."""
    return [generate_subject(phantom_cfg, i) for i in range(phantom_cfg.n_subjects)]


@pytest.fixture(scope="session")
def prepared(cohort):
    return [prepare_subject(s) for s, _ in cohort]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    lines = getattr(mod, "LINES", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
