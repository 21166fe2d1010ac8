import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from cemgmsdg.driver import ExperimentConfig, build_problem  # noqa: E402
from cemgmsdg.grid import GridConfig, build_grid  # noqa: E402


@pytest.fixture(scope="session")
def paper_grid():
    return build_grid(GridConfig())


@pytest.fixture(scope="session")
def toy_grid():
    return build_grid(GridConfig(3, 3, 3, 3))


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(20240607)


def _random_field(grid, seed, lo=1.0, hi=50.0):
    r = np.random.default_rng(seed)
    return np.exp(r.uniform(np.log(lo), np.log(hi), grid.fine_shape))


@pytest.fixture(scope="session")
def random_field_values(toy_grid):
    return _random_field(toy_grid, 7)


@pytest.fixture(scope="session")
def small_problem():
    """4x4 coarse, 4x4 fine, high-contrast mixed medium."""
    return build_problem(ExperimentConfig(coarse_n=4, fine_per_coarse=4, medium="mixed",
                                          contrast=1e3, seed=3))


@pytest.fixture(scope="session")
def medium_problem():
    """6x6 coarse, 4x4 fine, high-contrast channels."""
    return build_problem(ExperimentConfig(coarse_n=6, fine_per_coarse=4, medium="channels",
                                          contrast=1e4, seed=1))


# -- acceptance report ------------------------------------------------------

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
