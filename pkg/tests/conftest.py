import sys
from pathlib import Path

import numpy as np
import pytest

from vrlab.harness import TrainConfig

sys.path.insert(0, str(Path(__file__).parent))

CONFIGS = Path(__file__).resolve().parents[1] / "src" / "vrlab" / "configs"

# acceptance checks append "PASS/FAIL ..." lines here; they are echoed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def load_config(name: str, **overrides) -> TrainConfig:
    return TrainConfig.load(CONFIGS / f"{name}.yaml", [f"{k}={v}" for k, v in overrides.items()])


@pytest.fixture(scope="session")
def linear_pipeline():
    """The full comparison on the bundled linear config; shared by harness and acceptance tests."""
    from test_acceptance import linear_pipeline_result
    return linear_pipeline_result()
