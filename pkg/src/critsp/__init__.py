"""Variational solver for a critical Schrödinger-Poisson system with a concave term."""
from __future__ import annotations

from .errors import (
    BoundaryLeakageError,
    BoundaryLeakageWarning,
    ConfigError,
    CritSPError,
    GridMismatchError,
    NumericError,
    PreconditionError,
    UsageError,
)
from .field import Field, Grid3, h1_norm, norms
from .models import ProblemInstance, builtin_instance, make_potential, make_weight
from .poisson import solve_poisson
from .energy import compute_constants, evaluate_J, h1_gradient, sobolev_constant

__version__ = "0.1.0"
