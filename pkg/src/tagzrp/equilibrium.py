"""Invariant product measures, their palm and primed versions, and samplers.

Single-site weights are w(k) = alpha^k / (g(1) ... g(k)), w(0) = 1, so that

    bulk    mu(k)  = w(k) / Z
    palm    mu0(k) = k w(k) / (Z rho)        k >= 1
    primed  mu'(k) = w(k - 1) / Z            k >= 1

The tables are truncated where a geometric bound on the remaining terms
drops below ``tail_tol * Z``; the residual is folded into the last atom.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DensityOutOfRange, DivergentSeries
from .model import Configuration, LatticeSpec, RateFunction

SAFETY = 0.95
KIND_BULK, KIND_PALM, KIND_PRIMED = "bulk", "palm", "primed"
ENSEMBLES = {"R": KIND_BULK, "Q": KIND_PALM, "Qprime": KIND_PRIMED}
MAX_TERMS = 1_000_000


def _weights(g: RateFunction, alpha: float, tail_tol: float):
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    if alpha >= g.liminf_estimate or alpha > SAFETY * g.liminf_estimate:
        raise DivergentSeries(
            f"alpha={alpha} is not below {SAFETY} x liminf g ~ {g.liminf_estimate}"
        )
    # suffix maxima of alpha/g over the probe range bound the future term ratios
    ratios = alpha / g.probe_values[1:]
    suffix = np.maximum.accumulate(ratios[::-1])[::-1]
    far = alpha / g.liminf_estimate
    w = [1.0]
    total = 1.0
    k = 0
    while True:
        k += 1
        if k > MAX_TERMS:
            raise DivergentSeries("partition function did not converge")
        term = w[-1] * alpha / g(k)
        w.append(term)
        total += term
        q = max(suffix[k], far) if k < suffix.size else max(alpha / g(k + 1), far)
        if q <= SAFETY and alpha / g(k) <= SAFETY:
            tail = term * q / (1.0 - q)
            # keep a factor 100 in hand so rho inherits the same tolerance
            if tail < 1e-2 * tail_tol * total:
                break
    return np.asarray(w)


def partition_function(g: RateFunction, alpha: float, tail_tol: float = 1e-12):
    """Return (Z, K_max) with relative truncation error below ``tail_tol``."""
    w = _weights(g, alpha, tail_tol)
    return math.fsum(w), w.size - 1


def _cdf(pmf):
    c = np.cumsum(pmf)
    c[-1] = 1.0
    return c


@dataclass(frozen=True, eq=False)
class ModelParams:
    rate: RateFunction
    alpha: float
    rho: float
    Z: float
    K_max: int
    tail_tol: float
    weights: np.ndarray
    bulk_pmf: np.ndarray  # support 0..K_max
    palm_pmf: np.ndarray  # support 0..K_max, zero at 0
    primed_pmf: np.ndarray  # support 0..K_max+1, zero at 0

    @property
    def speed(self) -> float:
        """alpha / rho = E[g(eta_0)/eta_0] under the palm measure."""
        if self.rate.per_particle_constant:
            return float(self.rate.per_particle_table(1)[1])
        return self.alpha / self.rho

    def pmf(self, kind: str) -> np.ndarray:
        return {
            KIND_BULK: self.bulk_pmf,
            KIND_PALM: self.palm_pmf,
            KIND_PRIMED: self.primed_pmf,
        }[kind]

    def cdf(self, kind: str) -> np.ndarray:
        return _cdf(self.pmf(kind))


def equilibrium(g: RateFunction, alpha=None, rho=None, tail_tol: float = 1e-12):
    """Build the marginal tables from exactly one of ``alpha`` and ``rho``."""
    if (alpha is None) == (rho is None):
        raise ValueError("give exactly one of alpha and rho")
    if alpha is None:
        alpha = invert_density(g, rho, tail_tol)
    w = _weights(g, float(alpha), tail_tol)
    Z = math.fsum(w)
    ks = np.arange(w.size)
    bulk = w / Z
    rho_ = math.fsum(ks * bulk)
    palm = ks * bulk / rho_
    primed = np.concatenate([[0.0], bulk])
    return ModelParams(
        rate=g,
        alpha=float(alpha),
        rho=rho_,
        Z=Z,
        K_max=w.size - 1,
        tail_tol=tail_tol,
        weights=w,
        bulk_pmf=bulk,
        palm_pmf=palm,
        primed_pmf=primed,
    )


def density(g: RateFunction, alpha: float, tail_tol: float = 1e-12) -> float:
    w = _weights(g, alpha, tail_tol)
    return math.fsum(np.arange(w.size) * w) / math.fsum(w)


def alpha_max(g: RateFunction) -> float:
    """Largest alpha admitted by the truncation policy."""
    return SAFETY * g.liminf_estimate


def critical_density(g: RateFunction, tail_tol: float = 1e-12) -> float:
    """Estimate of rho* = lim rho(alpha) as alpha increases to liminf g.

    Reported as infinity when g looks unbounded (alpha/g(k) -> 0). Otherwise
    the density at the largest admitted alpha is returned, which is the
    upper end of what ``invert_density`` can reach.
    """
    v = g.probe_values
    half = v[g.probe_max // 2]
    if v[-1] >= 2 * half * (1 - 1e-9) and v[-1] > v[g.probe_max // 2 - 1]:
        return math.inf
    return density(g, alpha_max(g), tail_tol)


def invert_density(g: RateFunction, rho_target: float, tail_tol: float = 1e-12,
                   tol: float = 1e-10) -> float:
    """alpha with |rho(alpha) - rho_target| < tol, by bisection."""
    if not rho_target > 0:
        raise DensityOutOfRange("target density must be positive")
    hi = alpha_max(g)
    rho_hi = density(g, hi, tail_tol)
    if rho_target >= rho_hi:
        raise DensityOutOfRange(
            f"density {rho_target} not below the largest reachable {rho_hi:.6g}"
        )
    lo = 0.0
    for _ in range(500):
        mid = 0.5 * (lo + hi)
        r = density(g, mid, tail_tol)
        if abs(r - rho_target) < tol:
            return mid
        if r < rho_target:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 4 * np.finfo(float).eps * hi:
            break
    if abs(density(g, mid, tail_tol) - rho_target) < tol:
        return mid
    raise DensityOutOfRange(f"bisection stalled at alpha={mid}")


def sample_marginal(kind: str, params: ModelParams, rng, size=None):
    """Inverse-CDF draws from one of the single-site tables."""
    c = params.cdf(kind)
    u = rng.random(size)
    out = np.searchsorted(c, u, side="right")
    if size is None:
        return int(out)
    return out.astype(np.int64)


def sample_configuration(ensemble: str, lattice: LatticeSpec, params: ModelParams,
                         rng, size=None):
    """Product configuration on the torus; the origin uses the ensemble's marginal.

    ``ensemble`` is one of ``"R"``, ``"Q"``, ``"Qprime"``. Sites are drawn
    in center-out order. With ``size`` an array of shape
    (size, n_sites) of flat occupancies is returned instead.
    """
    kind = ENSEMBLES[ensemble]
    order = lattice.center_out_order()
    n = lattice.n_sites
    reps = 1 if size is None else size
    u = rng.random((reps, n))
    occ = np.empty((reps, n), dtype=np.int64)
    bulk = params.cdf(KIND_BULK)
    origin = params.cdf(kind)
    occ[:, order] = np.searchsorted(bulk, u, side="right")
    occ[:, 0] = np.searchsorted(origin, u[:, 0], side="right")
    if size is not None:
        return occ
    return Configuration(occ[0].reshape(lattice.shape),
                         reference_frame=ensemble != "R")


def stochastically_dominated(cdf_small, cdf_large, tol=1e-12) -> bool:
    """True when CDF ``cdf_small`` >= ``cdf_large`` everywhere (first is smaller)."""
    n = max(len(cdf_small), len(cdf_large))
    a = np.concatenate([cdf_small, np.ones(n - len(cdf_small))])
    b = np.concatenate([cdf_large, np.ones(n - len(cdf_large))])
    return bool(np.all(a >= b - tol))
