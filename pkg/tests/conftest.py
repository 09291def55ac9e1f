from __future__ import annotations

import warnings

import numpy as np
import pytest

from critsp import Grid3, builtin_instance, compute_constants
from critsp.cli import RunConfig, cmd_solve
from critsp.errors import BoundaryLeakageWarning

CANONICAL = dict(name="const_K_gaussian_f", L=12.0, N=48, q=1.5, fraction=0.5)


def canonical_instance(fraction: float = 0.5, name: str = "const_K_gaussian_f"):
    grid = Grid3(CANONICAL["L"], CANONICAL["N"])
    inst = builtin_instance(name, grid, CANONICAL["q"], 1.0)
    lam0 = compute_constants(inst).lambda0
    return inst.with_lambda(fraction * lam0)


@pytest.fixture(scope="session")
def canonical():
    return canonical_instance()


@pytest.fixture(scope="session")
def canonical_config():
    return RunConfig()


@pytest.fixture(scope="session")
def canonical_solve(tmp_path_factory):
    """One end-to-end solve of the canonical instance, shared by the suite."""
    out = tmp_path_factory.mktemp("canonical")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", BoundaryLeakageWarning)
        res = cmd_solve(RunConfig(), out)
    return res, out


@pytest.fixture(scope="session")
def bubble_grid():
    # resolves eps = 0.1 with h = 0.025 and holds the cut-off ball B_2
    return Grid3(2.25, 180)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
