import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats as sps

from tagzrp import estimators as est
from tagzrp.equilibrium import equilibrium
from tagzrp.errors import InsufficientSamples, PreconditionError
from tagzrp.estimators import (
    EnsembleStats,
    Moments,
    ReportRow,
    adjoint_identity_check,
    association_test,
    block_moments,
    chi_square_gof,
    clt_test,
    discrete_ks,
    drift_check,
    jackknife,
    lattice_ks,
    merge_all,
    site_identity_exact,
    superadditivity_scan,
    variance_bounds_check,
)
from tagzrp.model import LatticeSpec, validate_kernel, validate_rate
from tagzrp.simulator import Model, run_ensemble

P1 = validate_kernel({1: 1.0})


def model(rate, alpha, side=64):
    return Model.build(validate_rate(rate), P1, LatticeSpec(1, side), alpha=alpha)


# ---------------------------------------------------------------- accumulators


@given(st.integers(2, 300), st.integers(1, 4), st.integers(0, 2**31), st.data())
def test_merge_reproduces_unsplit(n, k, seed, data):
    X = np.random.default_rng(seed).normal(3.0, 2.0, size=(n, k))
    cut = data.draw(st.integers(0, n))
    whole = Moments.from_samples(X)
    merged = Moments.from_samples(X[:cut]).merge(Moments.from_samples(X[cut:]))
    assert merged.n == whole.n
    assert np.allclose(merged.mean, whole.mean, rtol=1e-12, atol=1e-12)
    assert np.allclose(merged.C, whole.C, rtol=1e-12, atol=1e-10)
    back = whole.unmerge(Moments.from_samples(X[cut:]))
    if cut >= 1:
        assert np.allclose(back.mean, X[:cut].mean(axis=0), rtol=1e-10, atol=1e-10)


@given(st.integers(0, 2**31))
def test_merge_order_independent(seed):
    X = np.random.default_rng(seed).exponential(size=(500, 2))
    parts = [Moments.from_samples(p) for p in np.array_split(X, 7)]
    a = merge_all(parts)
    b = merge_all(parts[::-1])
    c = parts[0]
    for p in parts[1:]:
        c = c.merge(p)
    for m in (b, c):
        assert np.allclose(m.mean, a.mean, rtol=1e-12)
        assert np.allclose(m.C, a.C, rtol=1e-12)


def test_jackknife_mean_matches_classical_se(rng):
    x = rng.normal(size=100_000)
    blocks = block_moments(x, np.arange(x.size))
    m, se = jackknife(blocks, lambda mo: float(mo.mean[0]))
    assert m == pytest.approx(x.mean(), abs=1e-12)
    assert se == pytest.approx(x.std(ddof=1) / math.sqrt(x.size), rel=0.2)


def test_stats_merge_equals_single_pass():
    m = model("min(k,3)", 0.8)
    a = run_ensemble(m, 5.0, [2.0, 5.0], 400, seed=1, first_replica=0)
    b = run_ensemble(m, 5.0, [2.0, 5.0], 400, seed=1, first_replica=400)
    both = run_ensemble(m, 5.0, [2.0, 5.0], 800, seed=1)
    s = EnsembleStats.from_run(a).merge(EnsembleStats.from_run(b))
    t = EnsembleStats.from_run(both)
    for c in range(2):
        assert s.estimate(s.f_var_x(c))[0] == pytest.approx(t.estimate(t.f_var_x(c))[0], rel=1e-12)


# ---------------------------------------------------------------- gates


def test_targets_closed_form():
    one = model("ind(k>=1)", 0.5)
    assert one.mean_velocity[0] == pytest.approx(0.5, rel=1e-12)
    assert one.diffusive_floor == pytest.approx(0.5, rel=1e-12)
    assert model("k", 1.3).mean_velocity[0] == 1.0


@pytest.fixture(scope="module")
def poisson_stats():
    m = model("k", 1.0)
    run = run_ensemble(m, 16.0, [1, 2, 3, 4, 6, 8, 12, 16], 10000, seed=12)
    return EnsembleStats.from_run(run)


def test_identity_rate_gates(poisson_stats):
    s = poisson_stats
    rows = drift_check(s) + variance_bounds_check(s, window=(2, 16))
    assert est.all_pass(rows), [r for r in rows if r.verdict == "fail"]
    for r in rows:
        if r.test == "variance-per-time":
            assert abs(r.estimate - 1.0) <= 3 * r.se


def test_superadditivity_identity_rate(poisson_stats):
    res = superadditivity_scan(poisson_stats)
    assert res.pairs >= 8
    assert res.violations == []


def test_superadditivity_degenerate_grid():
    s = EnsembleStats.from_arrays([5.0], np.zeros((10, 1, 1)), np.zeros((10, 1, 1)),
                                  np.arange(10), [1.0], 1.0)
    assert superadditivity_scan(s).violations == []


def test_min3_identity_residual():
    m = model("min(k,3)", 0.8)
    run = run_ensemble(m, 20.0, [5.0, 10.0, 20.0], 20000, seed=13)
    rows = [r for r in variance_bounds_check(EnsembleStats.from_run(run))
            if r.test == "variance-identity"]
    assert len(rows) == 3 and est.all_pass(rows)


def test_drift_check_needs_samples():
    s = EnsembleStats.from_arrays([1.0], np.zeros((50, 1, 1)), np.zeros((50, 1, 1)),
                                  np.arange(50), [1.0], 1.0)
    with pytest.raises(InsufficientSamples):
        drift_check(s)


def test_drift_gate_detects_wrong_target(poisson_stats):
    wrong = dataclasses.replace(poisson_stats, mean_velocity=np.array([1.1]), _total=None)
    assert not est.all_pass(drift_check(wrong))


# ---------------------------------------------------------------- association


def test_association_identity_rate():
    m = model("k", 1.0)
    run = run_ensemble(m, 20.0, [10.0, 20.0], 10000, seed=14)
    res = association_test(run.x[:, 0, 0], run.x[:, 1, 0], t=10.0)
    ident = [r for r in res.rows if r.test == "association[id;id]"][0]
    assert abs(ident.estimate) <= 3 * ident.se
    assert est.all_pass(res.rows)
    # algebraic identity on the same samples
    assert res.identity_cov == pytest.approx(res.identity_check, rel=1e-10, abs=1e-10)


def test_association_min_replicas():
    with pytest.raises(InsufficientSamples):
        association_test(np.zeros(10), np.ones(10))


def test_association_detects_negative_dependence(rng):
    x = rng.poisson(10, 20000).astype(float)
    y = x + rng.poisson(np.maximum(20 - x, 0))  # increment decreasing in x
    res = association_test(x, y)
    assert not est.all_pass(res.rows)


# ---------------------------------------------------------------- distribution tests


def test_ks_calibration_known_parameters():
    # p-values of a correctly specified test are uniform
    ps = []
    for i in range(200):
        x = np.random.default_rng(i).normal(size=10000)
        ps.append(clt_test(x, 1.0, loc=0.0, scale=1.0, min_samples=1000).p_value)
    assert sps.kstest(ps, "uniform").pvalue > 0.001


def test_ks_estimated_parameters_conservative():
    ps = [clt_test(np.random.default_rng(i).normal(size=10000), 1.0).p_value for i in range(100)]
    assert np.mean(ps) > 0.5


def test_lattice_ks_rounded_normal(rng):
    x = np.rint(rng.normal(50.0, 7.0, size=20000)).astype(np.int64)
    d, p = lattice_ks(x, 50.0, 7.0)
    assert p > 0.01
    _, p_bad = lattice_ks(x, 51.0, 7.0)
    assert p_bad < 0.01


def test_discrete_ks_poisson(rng):
    x = rng.poisson(30.0, 10000)
    assert discrete_ks(x, lambda k: sps.poisson.cdf(k, 30.0))[1] > 0.01
    assert discrete_ks(x + 1, lambda k: sps.poisson.cdf(k, 30.0))[1] < 0.01


def test_chi_square(rng):
    pmf = np.array([0.5, 0.25, 0.125, 0.0625, 0.0625])
    x = rng.choice(5, size=10000, p=pmf)
    assert chi_square_gof(x, pmf)[2] > 0.01
    assert chi_square_gof(x, np.full(5, 0.2))[2] < 0.01


def test_clt_preconditions():
    non_id = model("k^2", 0.1, side=8)
    with pytest.raises(PreconditionError):
        clt_test(np.zeros(10000, dtype=np.int64), 100.0, non_id)
    with pytest.raises(PreconditionError):
        clt_test(np.zeros(10000, dtype=np.int64), 10.0, model("min(k,3)", 0.8))
    with pytest.raises(InsufficientSamples):
        clt_test(np.zeros(100), 100.0)


def test_clt_identity_rate_skips_strict_check():
    m = model("k", 1.0)
    run = run_ensemble(m, 10.0, [10.0], 4000, seed=15)
    res = clt_test(run.x[:, 0, 0], 10.0, m, min_samples=1000, min_time=5.0)
    assert not res.strict_checked
    assert res.ci[0] <= 1.0 <= res.ci[1]
    assert res.passed


# ---------------------------------------------------------------- adjoint identities


@pytest.mark.parametrize("rate", ["k", "ind(k>=1)", "min(k,3)"])
def test_site_identity_exact(rate):
    p = equilibrium(validate_rate(rate), alpha=0.7)
    lhs, rhs = site_identity_exact(p, lambda k: np.ones_like(k, dtype=float))
    assert lhs == pytest.approx(0.7, rel=1e-12) and rhs == pytest.approx(0.7, rel=1e-12)


def test_site_identity_moment_oracle():
    # psi = eta_k, g(k) = k: E[eta^2] = alpha (alpha + 1) = alpha E[eta + 1]
    a = 1.3
    p = equilibrium(validate_rate("k"), alpha=a)
    lhs, rhs = site_identity_exact(p, lambda k: k.astype(float))
    assert lhs == pytest.approx(a * (a + 1), rel=1e-12)
    assert rhs == pytest.approx(a * (a + 1), rel=1e-12)


@pytest.mark.parametrize("rate", ["k", "ind(k>=1)", "min(k,3)"])
def test_adjoint_identities_small(rate):
    p = equilibrium(validate_rate(rate), alpha=0.6)
    rows = adjoint_identity_check(p, 200_000, np.random.default_rng(16))
    assert len(rows) == 16
    assert est.all_pass(rows), [r for r in rows if r.verdict == "fail"]


def test_adjoint_identities_reject_wrong_alpha():
    p = equilibrium(validate_rate("min(k,3)"), alpha=0.6)
    wrong = dataclasses.replace(p, alpha=0.66)
    rows = adjoint_identity_check(wrong, 200_000, np.random.default_rng(17))
    assert not est.all_pass(rows)


# ---------------------------------------------------------------- reports


def test_csv_layout():
    rows = [ReportRow("b", 2.0, 0.1, float("nan"), 0.0, "pass"),
            ReportRow("a", 1.0, 1e-20, 0.5, float("inf"), "fail")]
    text = est.render_csv(est.sort_rows(rows), config_text="x = 1\n")
    lines = text.splitlines()
    assert lines[0] == "test,t,estimate,se,target,verdict"
    assert lines[1] == "a,1.0,1e-20,0.5,inf,fail"
    assert lines[2] == "b,2.0,0.1,nan,0,pass"
    assert lines[-1] == "# config-hash: " + est.config_hash("x = 1\n")
    assert not est.all_pass(rows)
