from __future__ import annotations

import numpy as np
import pytest

from critsp.errors import UsageError
from critsp.field import Field, Grid3
from critsp.models import (
    Potential,
    ProblemInstance,
    Weight,
    builtin_instance,
    make_potential,
    make_weight,
)

G = Grid3(12.0, 48)


def test_const_instance_sup():
    inst = builtin_instance("const_K_gaussian_f", G, 1.5, 0.3)
    assert inst.potential.k_sup == 1.0
    assert inst.potential.is_constant
    assert inst.q == 1.5


def test_gaussian_l4_norm_oracle():
    # |e^{-|x|^2}|_4 = (int e^{-4|x|^2})^{1/4} = ((pi/4)^{3/2})^{1/4};
    # h = 0.25 keeps the Riemann-sum aliasing term e^{-pi^2/(4 h^2)} negligible
    inst = builtin_instance("const_K_gaussian_f", Grid3(12.0, 96), 1.5, 0.3)
    assert inst.weight.norm_f == pytest.approx((np.pi / 4) ** (3 / 8), rel=1e-6)


def test_norm_f_grid_convergence():
    a = builtin_instance("const_K_gaussian_f", Grid3(12.0, 48), 1.5, 1.0).weight.norm_f
    b = builtin_instance("const_K_gaussian_f", Grid3(12.0, 96), 1.5, 1.0).weight.norm_f
    assert abs(a - b) / b < 1e-4


def test_bump_holder_data():
    inst = builtin_instance("bump_K_gaussian_f", G, 1.5, 0.3)
    pot = inst.potential
    assert (pot.beta, pot.holder_C, pot.holder_delta) == (2.0, 1.0, 1.0)
    assert pot.holder_ok()
    # brute force on the grid: |1/(1+r^2) - 1| <= r^2
    r = G.radius()
    near = r < 1.0
    assert np.all(np.abs(pot.samples.values[near] - 1.0) <= r[near] ** 2 + 1e-15)


def test_compact_weight_support():
    inst = builtin_instance("const_K_compact_f", G, 1.5, 0.3)
    fv = inst.weight.samples.values
    assert np.all(fv[G.radius() >= 1.0] == 0.0)
    assert fv.max() == pytest.approx(1.0)


@pytest.mark.parametrize("q", [1.0, 2.0, 0.5, 2.5])
def test_q_range(q):
    with pytest.raises(UsageError, match="q must lie in"):
        builtin_instance("const_K_gaussian_f", G, q, 0.3)


def test_unknown_name_and_bad_lambda():
    with pytest.raises(UsageError):
        builtin_instance("nope", G, 1.5, 0.3)
    with pytest.raises(UsageError):
        builtin_instance("const_K_gaussian_f", G, 1.5, 0.0)
    with pytest.raises(UsageError):
        builtin_instance("const_K_gaussian_f", G, 1.5, -1.0)


def test_rejects_negative_f_and_bad_holder():
    neg = Field(G, -np.exp(-G.radius() ** 2))
    with pytest.raises(UsageError):
        Weight(neg, 1.5)
    with pytest.raises(UsageError):
        Weight(G.zeros(), 1.5)
    K = 1.0 / (1.0 + G.radius() ** 2)
    with pytest.raises(UsageError, match="Hölder"):
        Potential(Field(G, K), 1.0, (0.0, 0.0, 0.0), 2.0, 0.1, 1.0)
    with pytest.raises(UsageError, match="maximum"):
        Potential(Field(G, K), 1.0, (3.0, 0.0, 0.0), 2.0, 1.0, 1.0)


def test_instance_requires_shared_grid():
    pot = make_potential(G, "const")
    wt = make_weight(Grid3(6.0, 48), 1.5)
    with pytest.raises(UsageError):
        ProblemInstance(pot, wt, 0.5, G)
