"""
Shared fixtures. Solves are session-scoped: every suite reuses the same
converged solutions instead of re-running Newton.
"""

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent.parent))

from invariant import invariant_density
from models import LakeParams, RecyclingRate, validate_params
from solver import build_grid, solve, solve_params

SNAPSHOTS = Path(__file__).parent / "fixtures_snapshots"


@pytest.fixture(scope="session")
def snapshots() -> Path:
    return SNAPSHOTS


@pytest.fixture(scope="session")
def default_params():
    """b=0.65, c=0.5, rho=0.03, sigma=0.1, standard recycling"""
    return LakeParams()


@pytest.fixture(scope="session")
def default_solution(default_params):
    return solve_params(default_params)


@pytest.fixture(scope="session")
def default_density(default_solution):
    return invariant_density(default_solution)


@pytest.fixture(scope="session")
def coarse_solution(default_params):
    """n = 200: cheap enough for dense comparisons"""
    return solve_params(default_params, n=200)


@pytest.fixture(scope="session")
def unimodal_solution():
    """b=0.8 has a single attractor at small sigma"""
    return solve_params(LakeParams(b=0.8, c=0.5, rho=0.03, sigma=0.1))


@pytest.fixture(scope="session")
def unimodal_density(unimodal_solution):
    return invariant_density(unimodal_solution)


@pytest.fixture(scope="session")
def step_solution():
    return solve_params(LakeParams(rate=RecyclingRate.step(3.0)))


@pytest.fixture
def solve_on():
    """solve_on(params, l=None, n=4000, **kw) -> ValueSolution on an explicit grid"""
    def _solve(params, l=None, n=4000, **kw):
        p = validate_params(params)
        return solve(build_grid(p, l, n), p, **kw)
    return _solve
