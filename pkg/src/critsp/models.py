"""Coefficient fields ``K`` (potential) and ``f`` (weight) and the problem bundle."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import UsageError
from .field import Field, Grid3

__all__ = [
    "Potential",
    "Weight",
    "ProblemInstance",
    "BUILTIN_INSTANCES",
    "builtin_instance",
    "make_potential",
    "make_weight",
    "check_q",
]

BUILTIN_INSTANCES = ("const_K_gaussian_f", "bump_K_gaussian_f", "const_K_compact_f")


def check_q(q: float) -> float:
    q = float(q)
    if not (1.0 < q < 2.0):
        raise UsageError(f"q must lie in (1,2), got {q}")
    return q


@dataclass(frozen=True)
class Potential:
    """Samples of ``K`` with its maximum point and local Hölder data there."""

    samples: Field
    k_sup: float
    x0: tuple[float, float, float]
    beta: float
    holder_C: float
    holder_delta: float

    def __post_init__(self):
        K = self.samples.values
        grid = self.samples.grid
        if np.any(K < 0):
            raise UsageError("K must be nonnegative")
        if not self.k_sup > 0:
            raise UsageError("K must have a positive maximum")
        if not (1.0 <= self.beta < 3.0):
            raise UsageError(f"Hölder exponent must lie in [1,3), got {self.beta}")
        if self.holder_C <= 0 or self.holder_delta <= 0:
            raise UsageError("Hölder constants must be positive")
        if abs(float(K.max()) - self.k_sup) > 1e-12 * self.k_sup:
            raise UsageError("k_sup differs from the sampled maximum of K")
        i = nearest_index(grid, self.x0)
        if abs(K[i] - self.k_sup) > 1e-12 * self.k_sup:
            raise UsageError("K does not attain its maximum at the grid point nearest x0")
        if not self.holder_ok():
            raise UsageError("K violates the Hölder bound near x0")

    def holder_ok(self, rtol: float = 1e-12) -> bool:
        """``|K(x) - K(x0)| <= C |x-x0|^beta`` on grid points within ``delta``."""
        grid = self.samples.grid
        K = self.samples.values
        k0 = K[nearest_index(grid, self.x0)]
        r = grid.radius(self.x0)
        near = r < self.holder_delta
        lhs = np.abs(K[near] - k0)
        rhs = self.holder_C * r[near] ** self.beta
        return bool(np.all(lhs <= rhs + rtol * max(k0, 1.0)))

    @property
    def is_constant(self) -> bool:
        K = self.samples.values
        return bool(np.all(K == K.flat[0]))


@dataclass(frozen=True)
class Weight:
    samples: Field
    q: float
    norm_f: float = field(init=False)

    def __post_init__(self):
        check_q(self.q)
        fv = self.samples.values
        if np.any(fv < 0):
            raise UsageError("f must be nonnegative")
        if not np.any(fv > 0):
            raise UsageError("f must not vanish identically")
        p = 2.0 / (2.0 - self.q)
        nf = float((self.samples.grid.cell_volume * np.sum(fv**p)) ** (1.0 / p))
        if not np.isfinite(nf) or nf <= 0:
            raise UsageError("|f|_{2/(2-q)} must be finite and positive")
        object.__setattr__(self, "norm_f", nf)

    @property
    def exponent(self) -> float:
        """Lebesgue exponent ``2/(2-q)`` in which ``f`` is measured."""
        return 2.0 / (2.0 - self.q)


@dataclass(frozen=True)
class ProblemInstance:
    potential: Potential
    weight: Weight
    lam: float
    grid: Grid3
    name: str = "custom"

    def __post_init__(self):
        if not (np.isfinite(self.lam) and self.lam > 0):
            raise UsageError(f"lambda must be positive, got {self.lam}")
        if self.potential.samples.grid != self.grid or self.weight.samples.grid != self.grid:
            raise UsageError("K, f and the instance must share one grid")

    @property
    def q(self) -> float:
        return self.weight.q

    def with_lambda(self, lam: float) -> "ProblemInstance":
        return ProblemInstance(self.potential, self.weight, float(lam), self.grid, self.name)


def nearest_index(grid: Grid3, x) -> tuple[int, int, int]:
    x = np.asarray(x, dtype=float)
    idx = np.clip(np.rint((x + grid.L) / grid.h).astype(int), 0, grid.N - 1)
    return tuple(int(i) for i in idx)


def make_potential(grid: Grid3, kind: str = "const", amplitude: float = 1.0, width: float = 1.0) -> Potential:
    """``const``: ``K = A``; ``bump``: ``K = A / (1 + |x|^2 / w^2)``."""
    if amplitude <= 0:
        raise UsageError("K amplitude must be positive")
    if kind == "const":
        return Potential(
            samples=Field(grid, np.full(grid.shape, float(amplitude))),
            k_sup=float(amplitude),
            x0=(0.0, 0.0, 0.0),
            beta=1.0,
            holder_C=np.finfo(float).eps,
            holder_delta=2.0 * np.sqrt(3.0) * grid.L,
        )
    if kind == "bump":
        if width <= 0:
            raise UsageError("K width must be positive")
        r = grid.radius()
        K = amplitude / (1.0 + (r / width) ** 2)
        # |K - A| = A r^2/(w^2 + r^2) <= (A/w^2) r^2
        return Potential(
            samples=Field(grid, K),
            k_sup=float(amplitude),
            x0=(0.0, 0.0, 0.0),
            beta=2.0,
            holder_C=float(amplitude) / width**2,
            holder_delta=1.0,
        )
    raise UsageError(f"unknown K kind {kind!r}")


def make_weight(grid: Grid3, q: float, kind: str = "gaussian", amplitude: float = 1.0, scale: float = 1.0) -> Weight:
    """``gaussian``: ``A exp(-|x|^2/s^2)``; ``compact``: ``A exp(1 - 1/(1-|x|^2/s^2))`` on ``|x| < s``."""
    if amplitude <= 0 or scale <= 0:
        raise UsageError("f amplitude and scale must be positive")
    r = grid.radius()
    if kind == "gaussian":
        fv = amplitude * np.exp(-((r / scale) ** 2))
    elif kind == "compact":
        s2 = (r / scale) ** 2
        inside = s2 < 1.0
        fv = np.zeros(grid.shape)
        fv[inside] = amplitude * np.exp(1.0 - 1.0 / (1.0 - s2[inside]))
    else:
        raise UsageError(f"unknown f kind {kind!r}")
    return Weight(Field(grid, fv), check_q(q))


def builtin_instance(name: str, grid: Grid3, q: float, lam: float) -> ProblemInstance:
    q = check_q(q)
    if name == "const_K_gaussian_f":
        pot, wt = make_potential(grid, "const"), make_weight(grid, q, "gaussian")
    elif name == "bump_K_gaussian_f":
        pot, wt = make_potential(grid, "bump"), make_weight(grid, q, "gaussian")
    elif name == "const_K_compact_f":
        pot, wt = make_potential(grid, "const"), make_weight(grid, q, "compact")
    else:
        raise UsageError(f"unknown instance {name!r}; choose from {', '.join(BUILTIN_INSTANCES)}")
    return ProblemInstance(pot, wt, float(lam), grid, name)
