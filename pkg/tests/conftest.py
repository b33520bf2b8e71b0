import json
from pathlib import Path

import numpy as np
import pytest

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture(scope="session")
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture(scope="session")
def fixture_index() -> dict:
    with open(FIXTURES / "index.json", encoding="utf-8") as fh:
        return json.load(fh)


def random_simplex(rng: np.random.Generator, d: int, alpha: float = 1.5) -> np.ndarray:
    """A strictly positive Dirichlet draw, safe for KL."""
    v = rng.dirichlet(np.full(d, alpha))
    v = np.clip(v, 1e-12, None)
    return v / v.sum()


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One verdict line per acceptance criterion at the end of the run."""
    rows = []
    for status in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(status, []):
            if getattr(rep, "when", "call") != "call":
                continue
            if "test_acceptance.py" in rep.nodeid:
                rows.append((rep.nodeid.split("::")[-1], status))
    if rows:
        terminalreporter.section("acceptance criteria")
        for name, status in sorted(rows):
            terminalreporter.write_line(
                f"{'PASS' if status == 'passed' else 'FAIL'} {name}")
