import sys

import numpy as np
import pytest
from hypothesis import settings

from xlforget.regimes import model_config_for
from xlforget.tasks import generate_language, synthetic_specs

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_datasets():
    """Three small synthetic languages; enough for fast regime tests."""
    specs = synthetic_specs(3, overlap=0.2, num_families=2, seed=7)
    return {s.lang_id: generate_language(s, sizes=(24, 8, 8)) for s in specs}


@pytest.fixture(scope="session")
def tiny_model_cfg(tiny_datasets):
    return model_config_for(tiny_datasets, hidden_dim=8)


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is None or not acceptance.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in acceptance.summary_lines():
        terminalreporter.write_line(line)
