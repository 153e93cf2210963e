import numpy as np
import pytest

from tabwaker.envs import build_family

ACCEPTANCE_LINES = []


def sample_rows(cum_rows: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Vectorized inverse-CDF draw: one index per row of cumulative probabilities."""
    u = rng.random(len(cum_rows))
    idx = (u[:, None] >= cum_rows).sum(axis=1)
    return np.minimum(idx, cum_rows.shape[1] - 1)


@pytest.fixture(scope="session")
def family():
    return build_family({"name": "slip-grid"})


@pytest.fixture(scope="session")
def small_family():
    return build_family({"name": "slip-grid", "sizes": [3, 4], "slips": [0.0, 0.2], "ood_sizes": [5]})


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
