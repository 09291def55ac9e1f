"""Scalar fields on a truncated periodic cube with spectral calculus.

The cube ``[-L, L)^3`` is sampled at ``N`` points per axis.  Integrals are
the uniform Riemann sum ``h^3 * sum``; derivatives are spectral.
"""
from __future__ import annotations

import os
import warnings
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.fft as sfft

from .errors import BoundaryLeakageError, BoundaryLeakageWarning, GridMismatchError, UsageError

__all__ = [
    "Grid3",
    "Field",
    "NormReport",
    "LEAKAGE_TOL",
    "integrate",
    "inner_l2",
    "gradient_sq_norm",
    "h1_inner",
    "h1_norm",
    "lp_norm",
    "norms",
    "laplacian",
    "apply_h1_inverse",
    "check_leakage",
    "fft_workers",
]

#: Boundary-to-peak ratio above which a field is considered truncated.
LEAKAGE_TOL = 1e-8


def fft_workers() -> int:
    env = os.environ.get("SP_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return os.cpu_count() or 1


@dataclass(frozen=True)
class Grid3:
    """Uniform cubic grid on ``[-L, L)^3`` with ``N`` points per axis."""

    L: float
    N: int

    def __post_init__(self):
        if not np.isfinite(self.L) or self.L <= 0:
            raise UsageError(f"half width must be positive, got {self.L}")
        if int(self.N) != self.N or self.N < 8 or self.N % 2:
            raise UsageError(f"points per axis must be an even integer >= 8, got {self.N}")
        object.__setattr__(self, "N", int(self.N))
        object.__setattr__(self, "L", float(self.L))

    @property
    def h(self) -> float:
        return 2.0 * self.L / self.N

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.N, self.N, self.N)

    @property
    def cell_volume(self) -> float:
        return self.h**3

    @cached_property
    def x(self) -> np.ndarray:
        """1D node coordinates; the origin is node ``N // 2``."""
        return -self.L + self.h * np.arange(self.N)

    @cached_property
    def k(self) -> np.ndarray:
        """Full-length angular wavenumbers for one axis."""
        return 2.0 * np.pi * np.fft.fftfreq(self.N, d=self.h)

    @cached_property
    def k_derivative(self) -> np.ndarray:
        """Wavenumbers for first derivatives; Nyquist zeroed so real stays real."""
        k = self.k.copy()
        k[self.N // 2] = 0.0
        return k

    @cached_property
    def k2_half(self) -> np.ndarray:
        """``|k|^2`` on the real-FFT half spectrum, shape ``(N, N, N//2+1)``."""
        k = self.k
        kr = k[: self.N // 2 + 1].copy()
        kr[-1] = np.pi / self.h
        return k[:, None, None] ** 2 + k[None, :, None] ** 2 + kr[None, None, :] ** 2

    @cached_property
    def half_weights(self) -> np.ndarray:
        """Multiplicity of each real-FFT column in the full spectrum."""
        w = np.full(self.N // 2 + 1, 2.0)
        w[0] = 1.0
        w[-1] = 1.0
        return w

    def mesh(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return np.meshgrid(self.x, self.x, self.x, indexing="ij", sparse=True)

    def radius(self, center=(0.0, 0.0, 0.0)) -> np.ndarray:
        X, Y, Z = self.mesh()
        c = np.asarray(center, dtype=float)
        return np.sqrt((X - c[0]) ** 2 + (Y - c[1]) ** 2 + (Z - c[2]) ** 2)

    def zeros(self) -> "Field":
        return Field(self, np.zeros(self.shape))

    def field(self, values) -> "Field":
        return Field(self, values)


class Field:
    """Real samples on a :class:`Grid3`.

    Arithmetic between fields requires the same grid; scalars broadcast.
    The value array is read-only so fields can be shared freely.
    """

    __slots__ = ("grid", "values")
    __array_priority__ = 100

    def __init__(self, grid: Grid3, values):
        arr = np.array(values, dtype=float)
        if arr.ndim == 0:
            arr = np.full(grid.shape, float(arr))
        if arr.shape != grid.shape:
            raise UsageError(f"values have shape {arr.shape}, grid expects {grid.shape}")
        if not np.all(np.isfinite(arr)):
            raise UsageError("field values must be finite")
        arr.setflags(write=False)
        self.grid = grid
        self.values = arr

    def __repr__(self):
        return f"Field(L={self.grid.L}, N={self.grid.N}, max|u|={self.sup():.4g})"

    def _other(self, other):
        if isinstance(other, Field):
            if other.grid != self.grid:
                raise GridMismatchError("fields live on different grids")
            return other.values
        return other

    def __add__(self, other):
        return Field(self.grid, self.values + self._other(other))

    __radd__ = __add__

    def __sub__(self, other):
        return Field(self.grid, self.values - self._other(other))

    def __rsub__(self, other):
        return Field(self.grid, self._other(other) - self.values)

    def __mul__(self, other):
        return Field(self.grid, self.values * self._other(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return Field(self.grid, self.values / self._other(other))

    def __neg__(self):
        return Field(self.grid, -self.values)

    def __abs__(self):
        return Field(self.grid, np.abs(self.values))

    def sup(self) -> float:
        return float(np.max(np.abs(self.values)))

    def min(self) -> float:
        return float(np.min(self.values))

    def max(self) -> float:
        return float(np.max(self.values))


@dataclass(frozen=True)
class NormReport:
    l2: float
    l6: float
    lq_weighted: float
    h1: float
    d12: float


def _same_grid(*fields: Field) -> Grid3:
    grid = fields[0].grid
    for f in fields[1:]:
        if f.grid != grid:
            raise GridMismatchError("fields live on different grids")
    return grid


def _rfft(a: np.ndarray) -> np.ndarray:
    return sfft.rfftn(a, workers=fft_workers())


def _irfft(a: np.ndarray, n: int) -> np.ndarray:
    return sfft.irfftn(a, s=(n, n, n), workers=fft_workers())


def integrate(u: Field) -> float:
    return float(u.grid.cell_volume * np.sum(u.values))


def inner_l2(u: Field, v: Field) -> float:
    grid = _same_grid(u, v)
    return float(grid.cell_volume * np.vdot(u.values, v.values))


def _spectral_quadratic(u: np.ndarray, v: np.ndarray | None, grid: Grid3, symbol: np.ndarray) -> float:
    # Parseval on the half spectrum: h^3/N^3 * sum_k symbol * Re(u_k conj(v_k))
    uh = _rfft(u)
    vh = uh if v is None else _rfft(v)
    s = np.sum(grid.half_weights * symbol * (uh * np.conj(vh)).real)
    return float(grid.cell_volume * s / grid.N**3)


def gradient_sq_norm(u: Field) -> float:
    """``int |grad u|^2`` via Parseval."""
    return max(_spectral_quadratic(u.values, None, u.grid, u.grid.k2_half), 0.0)


def h1_inner(u: Field, v: Field) -> float:
    """``int grad u . grad v + u v``."""
    grid = _same_grid(u, v)
    return _spectral_quadratic(u.values, v.values, grid, 1.0 + grid.k2_half)


def h1_norm(u: Field) -> float:
    return float(np.sqrt(max(_spectral_quadratic(u.values, None, u.grid, 1.0 + u.grid.k2_half), 0.0)))


def lp_norm(u: Field, p: float) -> float:
    return float((u.grid.cell_volume * np.sum(np.abs(u.values) ** p)) ** (1.0 / p))


def norms(u: Field, weight: Field | None = None, q: float | None = None) -> NormReport:
    grid = u.grid
    a = u.values
    l2sq = grid.cell_volume * float(np.sum(a * a))
    d12sq = gradient_sq_norm(u)
    lq = 0.0
    if weight is not None and q is not None:
        _same_grid(u, weight)
        lq = grid.cell_volume * float(np.sum(weight.values * np.abs(a) ** q))
    return NormReport(
        l2=float(np.sqrt(l2sq)),
        l6=lp_norm(u, 6.0),
        lq_weighted=lq,
        h1=float(np.sqrt(l2sq + d12sq)),
        d12=float(np.sqrt(d12sq)),
    )


def laplacian(u: Field) -> Field:
    """Spectral Laplacian on the periodic cube."""
    grid = u.grid
    return Field(grid, _irfft(-grid.k2_half * _rfft(u.values), grid.N))


def apply_h1_inverse(a: np.ndarray, grid: Grid3) -> np.ndarray:
    """Apply ``(-Laplacian + 1)^{-1}`` to a raw sample array."""
    return _irfft(_rfft(a) / (1.0 + grid.k2_half), grid.N)


def apply_h1_operator(a: np.ndarray, grid: Grid3) -> np.ndarray:
    """Apply ``-Laplacian + 1`` to a raw sample array."""
    return _irfft(_rfft(a) * (1.0 + grid.k2_half), grid.N)


def boundary_ratio(u: Field) -> float:
    a = np.abs(u.values)
    peak = float(a.max())
    if peak == 0.0:
        return 0.0
    edge = max(a[0].max(), a[:, 0].max(), a[:, :, 0].max(), a[-1].max(), a[:, -1].max(), a[:, :, -1].max())
    return float(edge) / peak


def check_leakage(u: Field, name: str = "field", strict: bool = False, tol: float = LEAKAGE_TOL) -> float:
    """Warn (or raise in strict mode) when ``u`` has not decayed at the box edge."""
    ratio = boundary_ratio(u)
    if ratio > tol:
        msg = f"{name}: boundary/peak ratio {ratio:.3e} exceeds {tol:.0e}; truncation of R^3 is visible"
        if strict:
            raise BoundaryLeakageError(msg)
        warnings.warn(msg, BoundaryLeakageWarning, stacklevel=3)
    return ratio
