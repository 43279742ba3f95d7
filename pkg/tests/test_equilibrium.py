import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from tagzrp.equilibrium import (
    KIND_BULK,
    KIND_PALM,
    KIND_PRIMED,
    critical_density,
    density,
    equilibrium,
    invert_density,
    partition_function,
    sample_configuration,
    sample_marginal,
    stochastically_dominated,
)
from tagzrp.errors import DensityOutOfRange, DivergentSeries
from tagzrp.estimators import chi_square_gof
from tagzrp.model import LatticeSpec, validate_rate

G_ID = validate_rate("k")
G_ONE = validate_rate("ind(k>=1)")
G_MIN3 = validate_rate("min(k,3)")


def direct_sum(g, alpha, terms=200):
    """Independent oracle: plain summation of alpha^k / (g(1)...g(k))."""
    w, z, m = 1.0, 1.0, 0.0
    for k in range(1, terms):
        w *= alpha / g(k)
        z += w
        m += k * w
    return z, m / z


def test_partition_examples():
    Z, _ = partition_function(G_ID, 1.5)
    assert Z == pytest.approx(math.exp(1.5), rel=1e-12)
    Z, _ = partition_function(G_ONE, 0.5)
    assert Z == pytest.approx(2.0, rel=1e-12)
    with pytest.raises(DivergentSeries):
        partition_function(G_ONE, 1.1)


def test_density_examples():
    assert density(G_ID, 1.5) == pytest.approx(1.5, rel=1e-12)
    assert density(G_ONE, 0.5) == pytest.approx(1.0, rel=1e-12)
    z, rho = direct_sum(G_MIN3, 1.0)
    assert density(G_MIN3, 1.0) == pytest.approx(rho, abs=1e-10)
    assert partition_function(G_MIN3, 1.0)[0] == pytest.approx(z, rel=1e-11)


def test_invert_examples():
    assert invert_density(G_ID, 2.0) == pytest.approx(2.0, abs=1e-9)
    assert invert_density(G_ONE, 1.0) == pytest.approx(0.5, abs=1e-9)
    a = invert_density(G_MIN3, 1.5)
    assert abs(density(G_MIN3, a) - 1.5) < 1e-10
    with pytest.raises(DensityOutOfRange):
        invert_density(G_ONE, -1.0)


def test_critical_density():
    assert critical_density(G_ID) == math.inf
    rc = critical_density(G_ONE)
    assert math.isfinite(rc) and rc == pytest.approx(0.95 / 0.05, rel=1e-6)


@pytest.mark.parametrize("g", [G_ID, G_ONE, G_MIN3], ids=["k", "one", "min3"])
def test_palm_identity_and_normalisation(g):
    p = equilibrium(g, alpha=0.7)
    k = np.arange(p.bulk_pmf.size)
    assert np.allclose(p.palm_pmf * p.rho, k * p.bulk_pmf, rtol=0, atol=1e-15)
    assert p.primed_pmf[0] == 0.0
    assert np.allclose(p.primed_pmf[1:], p.bulk_pmf)
    for kind in (KIND_BULK, KIND_PALM, KIND_PRIMED):
        assert p.cdf(kind)[-1] == 1.0
        assert abs(p.pmf(kind).sum() - 1.0) < 1e-12


@pytest.mark.parametrize("g", [G_ID, G_ONE, G_MIN3], ids=["k", "one", "min3"])
def test_primed_below_palm_for_id_rates(g):
    for alpha in (0.2, 0.5, 0.8):
        p = equilibrium(g, alpha=alpha)
        assert stochastically_dominated(p.cdf(KIND_PRIMED), p.cdf(KIND_PALM))
        # equal laws when g(k)/k is constant, strict order otherwise
        assert stochastically_dominated(p.cdf(KIND_PALM), p.cdf(KIND_PRIMED)) == g.per_particle_constant


def test_speed_is_exact_for_linear_rates():
    assert equilibrium(validate_rate("2*k"), alpha=0.8).speed == 2.0


def test_exactly_one_of_alpha_rho():
    with pytest.raises(ValueError):
        equilibrium(G_ID)
    with pytest.raises(ValueError):
        equilibrium(G_ID, alpha=1.0, rho=1.0)


@given(st.floats(0.05, 5.0))
def test_density_round_trip(rho):
    assert abs(density(G_MIN3, invert_density(G_MIN3, rho)) - rho) < 1e-9


@given(st.sampled_from([G_ID, G_ONE, G_MIN3]), st.floats(0.05, 0.9), st.floats(1e-3, 0.05))
def test_density_increasing(g, a, da):
    assert density(g, a + da) > density(g, a)


# ---------------------------------------------------------------- samplers


def test_bulk_mean(rng):
    p = equilibrium(G_ID, alpha=1.5)
    x = sample_marginal(KIND_BULK, p, rng, 10**6)
    assert abs(x.mean() - 1.5) <= 3 * x.std() / 1e3


def test_palm_is_shifted_poisson(rng):
    p = equilibrium(G_ID, alpha=1.5)
    k = np.arange(1, p.palm_pmf.size)
    oracle = np.exp(-1.5) * 1.5 ** (k - 1) / np.array([math.factorial(int(i - 1)) for i in k])
    assert np.allclose(p.palm_pmf[1:], oracle, atol=1e-14)
    x = sample_marginal(KIND_PALM, p, rng, 10**6)
    assert x.min() >= 1
    assert abs(x.mean() - 2.5) <= 3 * x.std() / 1e3


def test_primed_gof(rng):
    p = equilibrium(G_MIN3, alpha=0.8)
    x = sample_marginal(KIND_PRIMED, p, rng, 10**6)
    assert x.min() >= 1
    assert (x == 1).mean() == pytest.approx(1 / p.Z, abs=5e-3)
    _, _, pv = chi_square_gof(x, p.primed_pmf)
    assert pv > 0.01


def test_configuration_ensembles(rng):
    lat = LatticeSpec(1, 64)
    p = equilibrium(G_ID, alpha=1.0)
    eta = sample_configuration("R", lat, p, rng, size=10**4)
    tot = eta.sum(axis=1)
    assert abs(tot.mean() - 64) <= 3 * tot.std() / 100
    q = sample_configuration("Q", lat, p, rng, size=10**4)
    assert q[:, 0].min() >= 1
    one = sample_configuration("Qprime", lat, p, rng)
    assert one[(0,)] >= 1
