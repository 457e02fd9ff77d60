from pathlib import Path

import numpy as np
import pytest

from equifl.data import ClientDataset, PartitionSpec, Records, build_clients

ROOT = Path(__file__).resolve().parents[1]
ADULT_CONFIG = ROOT / "configs" / "adult.toml"

_ACCEPTANCE_LINES: list[str] = []


def record_criterion(line: str) -> None:
    """Print now (visible with -s) and again in the terminal summary."""
    print(line)
    _ACCEPTANCE_LINES.append(line)


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def synthetic_records(n=300, d=5, seed=0):
    """Logistic labels with a group-dependent shift, so parity gaps are nonzero."""
    rng = np.random.default_rng(seed)
    s = rng.integers(0, 2, n)
    x = rng.normal(size=(n, d)) + 0.8 * s[:, None]
    w = rng.normal(size=d)
    y = (rng.uniform(size=n) < 1 / (1 + np.exp(-(x @ w)))).astype(np.int64)
    return Records(x, s, y, np.arange(n))


@pytest.fixture
def synthetic_clients():
    def make(n=300, num_clients=3, seed=0, alphas=None, d=5):
        rec = synthetic_records(n, d, seed)
        alphas = alphas or tuple([1.0] * num_clients)
        return build_clients(rec, PartitionSpec(alphas, seed, "per_client"))

    return make
