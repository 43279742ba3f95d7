"""Ensemble statistics and the statistical gates built on them.

Replicas are grouped into blocks by ``replica_id % n_blocks``. Each block
keeps mergeable first and second co-moments of the checkpoint observables
(x and A at every checkpoint), so statistics of the whole ensemble and all
leave-one-block-out jackknife replicates come from exact merge / unmerge
updates instead of passes over the raw samples.
"""

from __future__ import annotations

import csv
import hashlib
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, List, Optional, Sequence

import numpy as np
from scipy import stats as sps

from .errors import InsufficientSamples, PreconditionError

N_BLOCKS = 100
SIGMA = 3.0


# ---------------------------------------------------------------- moments


@dataclass
class Moments:
    """Count, mean vector and co-moment matrix sum (x - mean)(x - mean)^T."""

    n: int
    mean: np.ndarray
    C: np.ndarray

    @classmethod
    def empty(cls, k: int) -> "Moments":
        return cls(0, np.zeros(k), np.zeros((k, k)))

    @classmethod
    def from_samples(cls, X) -> "Moments":
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        n = X.shape[0]
        if n == 0:
            return cls.empty(X.shape[1])
        m = X.mean(axis=0)
        D = X - m
        return cls(n, m, D.T @ D)

    def merge(self, other: "Moments") -> "Moments":
        if other.n == 0:
            return Moments(self.n, self.mean.copy(), self.C.copy())
        if self.n == 0:
            return Moments(other.n, other.mean.copy(), other.C.copy())
        n = self.n + other.n
        d = other.mean - self.mean
        mean = self.mean + d * (other.n / n)
        C = self.C + other.C + np.outer(d, d) * (self.n * other.n / n)
        return Moments(n, mean, C)

    def unmerge(self, part: "Moments") -> "Moments":
        """Inverse of ``merge``: the moments of self without ``part``."""
        if part.n == 0:
            return Moments(self.n, self.mean.copy(), self.C.copy())
        na = self.n - part.n
        if na <= 0:
            return Moments.empty(self.mean.size)
        ma = (self.n * self.mean - part.n * part.mean) / na
        d = part.mean - ma
        C = self.C - part.C - np.outer(d, d) * (na * part.n / self.n)
        return Moments(na, ma, C)

    def cov(self, ddof: int = 1) -> np.ndarray:
        if self.n - ddof <= 0:
            return np.full_like(self.C, np.nan)
        return self.C / (self.n - ddof)

    def raw_second(self) -> np.ndarray:
        """E[X X^T] with the unbiased covariance."""
        return self.cov() + np.outer(self.mean, self.mean)


def merge_all(parts: Iterable[Moments]) -> Moments:
    """Pairwise (tree) merge, independent of how the input was chunked."""
    parts = list(parts)
    if not parts:
        raise ValueError("nothing to merge")
    while len(parts) > 1:
        nxt = [parts[i].merge(parts[i + 1]) for i in range(0, len(parts) - 1, 2)]
        if len(parts) % 2:
            nxt.append(parts[-1])
        parts = nxt
    return parts[0]


def block_moments(X, ids, n_blocks: int = N_BLOCKS) -> List[Moments]:
    X = np.asarray(X, dtype=float)
    b = np.asarray(ids) % n_blocks
    return [Moments.from_samples(X[b == i]) for i in range(n_blocks)]


def jackknife(blocks: Sequence[Moments], fn: Callable[[Moments], float]):
    """(estimate, SE) of ``fn`` by leave-one-block-out jackknife."""
    total = merge_all(blocks)
    est = fn(total)
    used = [b for b in blocks if b.n > 0]
    B = len(used)
    if B < 2:
        return est, math.nan
    reps = np.array([fn(total.unmerge(b)) for b in used], dtype=float)
    se = math.sqrt((B - 1) / B * float(np.sum((reps - reps.mean()) ** 2)))
    return est, se


# ---------------------------------------------------------------- ensemble stats


@dataclass
class EnsembleStats:
    """Block accumulators for x(t) and A(t) at each checkpoint.

    Column layout of the observable vector: for checkpoint c and component
    a, x is at ``c * 2d + a`` and A at ``c * 2d + d + a``.
    """

    times: np.ndarray
    dim: int
    blocks: List[Moments]
    mean_velocity: np.ndarray
    diffusive_floor: float
    _total: Optional[Moments] = field(default=None, repr=False)

    @classmethod
    def from_arrays(cls, times, x, A, ids, mean_velocity, diffusive_floor,
                    n_blocks: int = N_BLOCKS) -> "EnsembleStats":
        x = np.asarray(x, dtype=float)
        A = np.asarray(A, dtype=float)
        R, C, d = x.shape
        X = np.concatenate([x, A], axis=2).reshape(R, C * 2 * d)
        return cls(np.asarray(times, dtype=float), d,
                   block_moments(X, ids, n_blocks),
                   np.asarray(mean_velocity, dtype=float), float(diffusive_floor))

    @classmethod
    def from_run(cls, run, n_blocks: int = N_BLOCKS) -> "EnsembleStats":
        ids = run.first_replica + np.arange(run.n_replicas)
        return cls.from_arrays(run.times, run.x, run.A, ids,
                               run.model.mean_velocity, run.model.diffusive_floor,
                               n_blocks)

    def merge(self, other: "EnsembleStats") -> "EnsembleStats":
        if not np.array_equal(self.times, other.times) or len(self.blocks) != len(other.blocks):
            raise ValueError("incompatible statistics")
        blocks = [a.merge(b) for a, b in zip(self.blocks, other.blocks)]
        return EnsembleStats(self.times, self.dim, blocks, self.mean_velocity,
                             self.diffusive_floor)

    @property
    def total(self) -> Moments:
        if self._total is None:
            self._total = merge_all(self.blocks)
        return self._total

    @property
    def n(self) -> int:
        return self.total.n

    def index(self, c: int) -> int:
        if c < 0 or c >= self.times.size:
            raise IndexError(c)
        return c

    def checkpoint(self, t: float) -> int:
        hit = np.flatnonzero(np.isclose(self.times, t, rtol=0, atol=1e-12))
        if hit.size == 0:
            raise KeyError(f"no checkpoint at t={t}")
        return int(hit[0])

    def _cols(self, c):
        d = self.dim
        base = c * 2 * d
        return np.arange(base, base + d), np.arange(base + d, base + 2 * d)

    # statistics as functions of a Moments object
    def f_mean_x(self, c, a=0):
        xi, _ = self._cols(c)
        return lambda m: float(m.mean[xi[a]])

    def f_var_x(self, c):
        xi, _ = self._cols(c)
        return lambda m: float(np.trace(m.cov()[np.ix_(xi, xi)]))

    def f_mean_A2(self, c):
        _, ai = self._cols(c)
        return lambda m: float(np.trace(m.raw_second()[np.ix_(ai, ai)]))

    def f_mean_MA(self, c):
        xi, ai = self._cols(c)
        mu = self.mean_velocity * self.times[c]

        def fn(m):
            S = m.raw_second()
            xa = S[xi, ai]
            aa = S[ai, ai]
            return float(np.sum(xa - mu * m.mean[ai] - aa))

        return fn

    def f_mean_M(self, c, a=0):
        xi, ai = self._cols(c)
        mu = self.mean_velocity[a] * self.times[c]
        return lambda m: float(m.mean[xi[a]] - mu - m.mean[ai[a]])

    def f_mean_M2(self, c):
        xi, ai = self._cols(c)
        mu = self.mean_velocity * self.times[c]

        def fn(m):
            S = m.cov()
            v = S[xi, xi] + S[ai, ai] - 2 * S[xi, ai]
            b = m.mean[xi] - mu - m.mean[ai]
            return float(np.sum(v + b * b))

        return fn

    def f_identity_residual(self, c):
        fv = self.f_var_x(c)
        fa = self.f_mean_A2(c)
        floor = self.diffusive_floor * self.times[c]
        return lambda m: fv(m) - floor - fa(m)

    def estimate(self, fn):
        return jackknife(self.blocks, fn)


# ---------------------------------------------------------------- reports


@dataclass(frozen=True)
class ReportRow:
    test: str
    t: float
    estimate: float
    se: float
    target: float
    verdict: str  # "pass", "fail" or "info"

    def as_list(self):
        return [self.test, fmt_float(self.t), fmt_float(self.estimate),
                fmt_float(self.se), fmt_float(self.target), self.verdict]


REPORT_COLUMNS = ("test", "t", "estimate", "se", "target", "verdict")


def fmt_float(v) -> str:
    """Shortest round-tripping text of a float; fixed spellings for nan/inf."""
    if v is None:
        return ""
    v = float(v)
    if math.isnan(v):
        return "nan"
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    if v == 0.0:
        return "0"
    return repr(v)


def verdict(ok: bool) -> str:
    return "pass" if ok else "fail"


def all_pass(rows: Iterable[ReportRow]) -> bool:
    return all(r.verdict != "fail" for r in rows)


def config_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def write_csv(fh, rows: Iterable, columns=REPORT_COLUMNS, config_text: str = "") -> None:
    """CSV with a header row and a trailing ``# config-hash:`` comment."""
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow(r.as_list() if isinstance(r, ReportRow) else [
            fmt_float(v) if isinstance(v, (float, np.floating)) else v for v in r])
    fh.write(f"# config-hash: {config_hash(config_text)}\n")


def render_csv(rows, columns=REPORT_COLUMNS, config_text: str = "") -> str:
    buf = io.StringIO()
    write_csv(buf, rows, columns, config_text)
    return buf.getvalue()


def sort_rows(rows: Iterable[ReportRow]) -> List[ReportRow]:
    return sorted(rows, key=lambda r: (r.test, r.t))


# ---------------------------------------------------------------- gates


def drift_check(stats: EnsembleStats, model=None, sigma: float = SIGMA) -> List[ReportRow]:
    """|mean x(t)/t - (alpha/rho) sum_j j p(j)| <= sigma SE per checkpoint."""
    if stats.n < 100:
        raise InsufficientSamples("drift check needs at least 100 replicas")
    target = stats.mean_velocity
    rows = []
    for c, t in enumerate(stats.times):
        if t <= 0:
            continue
        for a in range(stats.dim):
            f = stats.f_mean_x(c, a)
            est, se = stats.estimate(lambda m: f(m) / t)
            name = "drift" if stats.dim == 1 else f"drift[{a}]"
            rows.append(ReportRow(name, t, est, se, float(target[a]),
                                  verdict(abs(est - target[a]) <= sigma * se)))
    return rows


def variance_bounds_check(stats: EnsembleStats, model=None, window=(10.0, 100.0),
                          ratio_gate: float = 2.0, sigma: float = SIGMA) -> List[ReportRow]:
    """Lower bound, variance identity and boundedness of V(t)/t."""
    if stats.n < 1000:
        raise InsufficientSamples("variance checks need at least 1000 replicas")
    floor = stats.diffusive_floor
    rows = []
    in_window = []
    for c, t in enumerate(stats.times):
        if t <= 0:
            continue
        fv = stats.f_var_x(c)
        v, se = stats.estimate(fv)
        rows.append(ReportRow("variance-lower-bound", t, v, se, floor * t,
                              verdict(v >= floor * t - sigma * se)))
        r, rse = stats.estimate(stats.f_identity_residual(c))
        rows.append(ReportRow("variance-identity", t, r, rse, 0.0,
                              verdict(abs(r) <= sigma * rse)))
        vt, vtse = stats.estimate(lambda m, fv=fv, t=t: fv(m) / t)
        rows.append(ReportRow("variance-per-time", t, vt, vtse, floor, "info"))
        if window[0] <= t <= window[1]:
            in_window.append(c)
    if len(in_window) >= 2:
        fns = [stats.f_var_x(c) for c in in_window]
        ts = [stats.times[c] for c in in_window]

        def ratio(m):
            vals = [f(m) / t for f, t in zip(fns, ts)]
            return max(vals) / min(vals)

        est, se = stats.estimate(ratio)
        rows.append(ReportRow("variance-boundedness", float(ts[-1]), est, se,
                              ratio_gate, verdict(est <= ratio_gate)))
    return rows


def martingale_check(stats: EnsembleStats, sigma: float = SIGMA) -> List[ReportRow]:
    """Mean of M, mean of M.A and the quadratic-variation identity E|M|^2."""
    rows = []
    for c, t in enumerate(stats.times):
        if t <= 0:
            continue
        for a in range(stats.dim):
            est, se = stats.estimate(stats.f_mean_M(c, a))
            rows.append(ReportRow("martingale-mean", t, est, se, 0.0,
                                  verdict(abs(est) <= sigma * se)))
        est, se = stats.estimate(stats.f_mean_MA(c))
        rows.append(ReportRow("martingale-orthogonality", t, est, se, 0.0,
                              verdict(abs(est) <= sigma * se)))
        target = stats.diffusive_floor * t
        est, se = stats.estimate(stats.f_mean_M2(c))
        rows.append(ReportRow("quadratic-variation", t, est, se, target,
                              verdict(abs(est - target) <= sigma * se)))
    return rows


@dataclass(frozen=True)
class SuperadditivityResult:
    violations: list
    pairs: int
    limit_estimate: float
    limit_se: float
    rows: list


def superadditivity_scan(stats: EnsembleStats, sigma: float = SIGMA) -> SuperadditivityResult:
    """Check V(t+r) >= V(t) + V(r) - sigma * combined SE on all grid pairs.

    The grid is the set of positive checkpoint times; a pair (t, r) is used
    when t + r is also a checkpoint. The combined SE adds the three
    jackknife SEs in quadrature.
    """
    ts = [float(t) for t in stats.times if t > 0]
    if len(ts) < 2:
        return SuperadditivityResult([], 0, math.nan, math.nan, [])
    idx = {t: stats.checkpoint(t) for t in ts}
    V = {t: stats.estimate(stats.f_var_x(idx[t])) for t in ts}
    violations = []
    rows = []
    pairs = 0
    for i, t in enumerate(ts):
        for r in ts[i:]:
            s = t + r
            match = [u for u in ts if abs(u - s) <= 1e-9 * max(1.0, s)]
            if not match:
                continue
            s = match[0]
            pairs += 1
            d = V[s][0] - V[t][0] - V[r][0]
            se = math.sqrt(V[s][1] ** 2 + V[t][1] ** 2 + V[r][1] ** 2)
            ok = d >= -sigma * se
            rows.append(ReportRow(f"superadditivity[{fmt_float(t)}+{fmt_float(r)}]",
                                  s, d, se, 0.0, verdict(ok)))
            if not ok:
                violations.append((t, r, d, se))
    ratios = [(V[t][0] / t, V[t][1] / t) for t in ts]
    best = max(range(len(ts)), key=lambda i: ratios[i][0])
    rows.append(ReportRow("superadditivity-limit", ts[best], ratios[best][0],
                          ratios[best][1], stats.diffusive_floor, "info"))
    return SuperadditivityResult(violations, pairs, ratios[best][0], ratios[best][1], rows)


# ---------------------------------------------------------------- association


def ramp(a: float, b: float):
    """x -> min(max(x - a, 0), b), nondecreasing."""
    return lambda x: np.minimum(np.maximum(np.asarray(x, dtype=float) - a, 0.0), b)


def identity_fn(x):
    return np.asarray(x, dtype=float)


def monotone_family(samples, quantiles=(0.1, 0.25, 0.5, 0.75, 0.9)):
    """Identity plus clipped ramps anchored at sample quantiles."""
    s = np.asarray(samples, dtype=float)
    q = np.quantile(s, quantiles)
    lo, hi = np.quantile(s, [0.25, 0.75])
    b = max(1.0, float(hi - lo))
    fam = [("id", identity_fn)]
    for qq, a in zip(quantiles, q):
        fam.append((f"ramp(q={qq:g},b={b:g})", ramp(float(np.floor(a)), b)))
    return fam


@dataclass(frozen=True)
class AssociationResult:
    rows: list
    min_z: float
    identity_cov: float
    identity_check: float  # (V(t+s) - V(t) - Var(increment)) / 2 on the same samples


def association_test(x_t, x_ts, ids=None, phis=None, psis=None, sigma: float = SIGMA,
                     t: float = math.nan, min_replicas: int = 10_000,
                     n_blocks: int = N_BLOCKS) -> AssociationResult:
    """Cov(phi(x(t+s) - x(t)), psi(x(t))) >= -sigma SE for monotone pairs."""
    x_t = np.asarray(x_t, dtype=float)
    x_ts = np.asarray(x_ts, dtype=float)
    n = x_t.size
    if n < min_replicas:
        raise InsufficientSamples(f"association test needs {min_replicas} replicas")
    ids = np.arange(n) if ids is None else np.asarray(ids)
    inc = x_ts - x_t
    phis = monotone_family(inc) if phis is None else phis
    psis = monotone_family(x_t) if psis is None else psis
    cols = [f(inc) for _, f in phis] + [f(x_t) for _, f in psis]
    blocks = block_moments(np.column_stack(cols), ids, n_blocks)
    P = len(phis)
    rows = []
    zs = []
    for i, (pn, _) in enumerate(phis):
        for j, (qn, _) in enumerate(psis):
            est, se = jackknife(blocks, lambda m, i=i, j=P + j: float(m.cov()[i, j]))
            ok = est >= -sigma * se
            zs.append(est / se if se > 0 else (0.0 if est >= 0 else -math.inf))
            rows.append(ReportRow(f"association[{pn};{qn}]", t, est, se, 0.0, verdict(ok)))
    c_id = float(np.cov(inc, x_t, ddof=1)[0, 1])
    algebraic = (np.var(x_ts, ddof=1) - np.var(x_t, ddof=1) - np.var(inc, ddof=1)) / 2
    return AssociationResult(rows, float(min(zs)), c_id, float(algebraic))


# ---------------------------------------------------------------- CLT


@dataclass(frozen=True)
class CLTResult:
    sigma2: float
    se: float
    ci: tuple
    ks_stat: float
    p_value: float
    strict_checked: bool
    passed: bool
    rows: list


def lattice_ks(samples, loc: float, scale: float):
    """KS distance of integer samples to N(loc, scale^2), with continuity correction.

    The empirical CDF is compared with the normal CDF at k + 1/2 on every
    attained integer k, i.e. with the law of the normal rounded to the
    nearest integer. The p-value uses the finite-n two-sided KS law.
    """
    s = np.sort(np.asarray(samples))
    n = s.size
    ks, counts = np.unique(s, return_counts=True)
    ecdf = np.cumsum(counts) / n
    prev = np.concatenate([[0.0], ecdf[:-1]])
    upper = sps.norm.cdf((ks + 0.5 - loc) / scale)
    lower = sps.norm.cdf((ks - 0.5 - loc) / scale)
    d = max(float(np.max(np.abs(ecdf - upper))), float(np.max(np.abs(prev - lower))))
    return d, float(sps.kstwo.sf(d, n))


def discrete_ks(samples, cdf: Callable):
    """KS distance of integer samples to an integer law with CDF ``cdf``."""
    s = np.sort(np.asarray(samples))
    n = s.size
    ks, counts = np.unique(s, return_counts=True)
    ecdf = np.cumsum(counts) / n
    prev = np.concatenate([[0.0], ecdf[:-1]])
    F = cdf(ks)
    Fm = cdf(ks - 1)
    d = max(float(np.max(np.abs(ecdf - F))), float(np.max(np.abs(prev - Fm))))
    return d, float(sps.kstwo.sf(d, n))


def clt_preconditions(model, t: float, require_id: bool = True, min_time: float = 50.0) -> None:
    if not model.kernel.is_totally_asymmetric_nn:
        raise PreconditionError("CLT test needs d = 1 and p(1) = 1")
    if require_id and not model.rate.is_id:
        raise PreconditionError("CLT test needs a rate with g increasing and g(k)/k decreasing")
    if t < min_time:
        raise PreconditionError(f"CLT test needs t >= {min_time}")


def chi_square_gof(samples, pmf, min_expected: float = 5.0):
    """Pearson test of integer samples against ``pmf`` on {0, 1, ...}.

    Cells are merged left to right until each expects ``min_expected``
    counts; the last cell absorbs the tail. Returns (stat, dof, p-value).
    """
    x = np.asarray(samples, dtype=np.int64).ravel()
    n = x.size
    pmf = np.asarray(pmf, dtype=float)
    if n == 0:
        raise InsufficientSamples("chi-square test needs samples")
    if x.min() < 0:
        raise ValueError("samples must be nonnegative integers")
    top = max(int(x.max()), pmf.size - 1)
    counts = np.bincount(x, minlength=top + 1).astype(float)
    probs = np.zeros(top + 1)
    probs[: pmf.size] = pmf
    probs[-1] += max(0.0, 1.0 - probs.sum())
    obs, exp = [], []
    co = ce = 0.0
    for c, q in zip(counts, probs):
        co += c
        ce += q * n
        if ce >= min_expected:
            obs.append(co)
            exp.append(ce)
            co = ce = 0.0
    if ce > 0 or co > 0:
        if exp:
            obs[-1] += co
            exp[-1] += ce
        else:
            obs.append(co)
            exp.append(ce)
    obs = np.asarray(obs)
    exp = np.asarray(exp)
    dof = obs.size - 1
    if dof < 1:
        raise InsufficientSamples("chi-square test needs at least two cells")
    stat = float(np.sum((obs - exp) ** 2 / exp))
    return stat, dof, float(sps.chi2.sf(stat, dof))


def clt_test(samples, t: float, model=None, ids=None, require_id: bool = True,
             level: float = 0.01, ci_level: float = 0.99, loc=None, scale=None,
             min_samples: int = 10_000, min_time: float = 50.0,
             n_blocks: int = N_BLOCKS) -> CLTResult:
    """KS test of the standardized x(t) against N(0,1) and a CI for V(t)/t.

    With a model, the hypotheses of the CLT are enforced and the CI lower
    bound must exceed alpha/rho, except when g(k)/k is constant (then the
    compensator vanishes and V(t)/t = alpha/rho exactly). ``loc`` and
    ``scale`` replace the sample mean and SD in the standardization.
    """
    x = np.asarray(samples)
    if x.ndim > 1:
        x = x[..., 0]
    n = x.size
    if n < min_samples:
        raise InsufficientSamples(f"CLT test needs at least {min_samples} samples")
    if model is not None:
        clt_preconditions(model, t, require_id, min_time)
    ids = np.arange(n) if ids is None else np.asarray(ids)
    blocks = block_moments(x.astype(float), ids, n_blocks)
    s2, se = jackknife(blocks, lambda m: float(m.cov()[0, 0]) / t)
    z = sps.norm.ppf(0.5 + ci_level / 2)
    ci = (s2 - z * se, s2 + z * se)
    mu = float(np.mean(x)) if loc is None else float(loc)
    sd = math.sqrt(float(np.var(x, ddof=1))) if scale is None else float(scale)
    if np.issubdtype(x.dtype, np.integer):
        d, p = lattice_ks(x, mu, sd)
    else:
        d, p = sps.kstest((x - mu) / sd, "norm")
        d, p = float(d), float(p)
    rows = [ReportRow("clt-ks", t, d, math.nan, level, verdict(p > level)),
            ReportRow("clt-ks-pvalue", t, p, math.nan, level, verdict(p > level))]
    strict = False
    ok = p > level
    if model is not None:
        floor = model.diffusive_floor
        strict = not model.rate.per_particle_constant
        if strict:
            good = ci[0] > floor
            rows.append(ReportRow("clt-sigma2", t, s2, se, floor, verdict(good)))
            ok = ok and good
        else:
            good = ci[0] <= floor <= ci[1]
            rows.append(ReportRow("clt-sigma2", t, s2, se, floor, verdict(good)))
            ok = ok and good
        rows.append(ReportRow("clt-sigma2-ci-low", t, ci[0], math.nan, floor, "info"))
        rows.append(ReportRow("clt-sigma2-ci-high", t, ci[1], math.nan, floor, "info"))
    return CLTResult(s2, se, ci, d, p, strict, ok, rows)


# ---------------------------------------------------------------- adjoint identities


class Window:
    """Occupancies on the cube [-w, w]^d, flattened; helpers for local moves."""

    def __init__(self, dim: int, radius: int):
        self.dim = dim
        self.radius = radius
        self.side = 2 * radius + 1
        self.shape = (self.side,) * dim

    def flat(self, site) -> int:
        site = (site,) if isinstance(site, (int, np.integer)) else tuple(site)
        return int(np.ravel_multi_index(tuple(c + self.radius for c in site), self.shape))

    @property
    def origin(self) -> int:
        return self.flat((0,) * self.dim)

    def add(self, eta, site):
        out = eta.copy()
        out[:, self.flat(site)] += 1
        return out

    def tagged_jump(self, eta, j):
        """tau_j(eta^{0,j}) on the window (sites shifted in from outside are dropped)."""
        j = (j,) if isinstance(j, (int, np.integer)) else tuple(j)
        moved = eta.copy()
        moved[:, self.origin] -= 1
        moved[:, self.flat(j)] += 1
        cube = moved.reshape((-1,) + self.shape)
        out = np.zeros_like(cube)
        src = [slice(None)]
        dst = [slice(None)]
        for c in j:
            if c >= 0:
                src.append(slice(c, self.side))
                dst.append(slice(0, self.side - c))
            else:
                src.append(slice(0, self.side + c))
                dst.append(slice(-c, self.side))
        out[tuple(dst)] = cube[tuple(src)]
        return out.reshape(eta.shape)


def psi_library(dim: int = 1):
    """Fixed set of local test functions of a window array (n, sites)."""
    e1 = (1,) + (0,) * (dim - 1)
    m1 = (-1,) + (0,) * (dim - 1)
    e2 = (2,) + (0,) * (dim - 1)
    z = (0,) * dim

    def make(win: Window):
        i0, i1, im1, i2 = (win.flat(s) for s in (z, e1, m1, e2))
        return {
            "one": lambda eta: np.ones(eta.shape[0]),
            "ind(eta_1>=2)": lambda eta: (eta[:, i1] >= 2).astype(float),
            "min(eta_1,2)*min(eta_-1,2)": lambda eta: (
                np.minimum(eta[:, i1], 2) * np.minimum(eta[:, im1], 2)).astype(float),
            "1/(1+eta_0+eta_2)": lambda eta: 1.0 / (1.0 + eta[:, i0] + eta[:, i2]),
        }

    return make


def sample_window(params, dim: int, radius: int, n: int, rng, ensemble="Q"):
    """n draws of the product measure on [-radius, radius]^d."""
    from .equilibrium import ENSEMBLES, KIND_BULK

    win = Window(dim, radius)
    bulk = params.cdf(KIND_BULK)
    origin = params.cdf(ENSEMBLES[ensemble])
    u = rng.random((n, win.side**dim))
    eta = np.searchsorted(bulk, u, side="right").astype(np.int64)
    eta[:, win.origin] = np.searchsorted(origin, u[:, win.origin], side="right")
    return win, eta


IDENTITIES = ("site", "origin", "shift", "reverse-shift")


def identity_integrands(kind: str, eta, win: Window, g_tab, h_tab, alpha: float,
                        psi, k, j):
    """Per-sample (LHS, RHS) integrands of one of the four identities."""
    o = win.origin
    n0 = eta[:, o]
    if kind == "site":
        kk = win.flat(k)
        return g_tab[eta[:, kk]] * psi(eta), alpha * psi(win.add(eta, k))
    if kind == "origin":
        lhs = (g_tab[n0] - h_tab[n0]) * psi(eta)
        return lhs, alpha * psi(win.add(eta, (0,) * win.dim))
    if kind == "shift":
        return h_tab[n0] * psi(eta), h_tab[n0] * psi(win.tagged_jump(eta, j))
    if kind == "reverse-shift":
        jj = win.flat(j)
        lhs = (eta[:, jj] + 1) * h_tab[n0] * psi(eta)
        mj = tuple(-c for c in ((j,) if isinstance(j, (int, np.integer)) else j))
        return lhs, g_tab[n0] * psi(win.tagged_jump(eta, mj))
    raise ValueError(kind)


def adjoint_identity_check(params, n: int, rng, dim: int = 1, k=1, j=1,
                           psis=None, sigma: float = SIGMA, chunk: int = 250_000,
                           radius: int = 4) -> List[ReportRow]:
    """Monte Carlo residuals of the four palm-measure identities.

    Both sides are evaluated on the same draws from Q_alpha, so each
    residual is the mean of a per-sample difference and its SE is the SE
    of that difference.
    """
    k = (k,) + (0,) * (dim - 1) if isinstance(k, (int, np.integer)) else tuple(k)
    j = (j,) + (0,) * (dim - 1) if isinstance(j, (int, np.integer)) else tuple(j)
    if not any(k):
        raise ValueError("the site identity needs k != 0")
    reach = max(max(abs(c) for c in k), max(abs(c) for c in j))
    radius = max(radius, 3 + reach)
    kmax = params.K_max + 3
    g_tab = params.rate.table(kmax)
    h_tab = params.rate.per_particle_table(kmax)
    lib = (psis or psi_library(dim))(Window(dim, radius))
    acc = {(name, kind): Moments.empty(1) for name in lib for kind in IDENTITIES}
    done = 0
    while done < n:
        m = min(chunk, n - done)
        win, eta = sample_window(params, dim, radius, m, rng)
        for name, psi in lib.items():
            for kind in IDENTITIES:
                lhs, rhs = identity_integrands(kind, eta, win, g_tab, h_tab,
                                               params.alpha, psi, k, j)
                acc[name, kind] = acc[name, kind].merge(Moments.from_samples(lhs - rhs))
        done += m
    rows = []
    for (name, kind), mo in acc.items():
        est = float(mo.mean[0])
        se = math.sqrt(max(float(mo.cov()[0, 0]), 0.0) / mo.n)
        rows.append(ReportRow(f"identity-{kind}[{name}]", math.nan, est, se, 0.0,
                              verdict(abs(est) <= sigma * se)))
    return rows


def site_identity_exact(params, psi_single: Callable[[np.ndarray], np.ndarray]):
    """Both sides of E[g(eta_k) psi(eta_k)] = alpha E[psi(eta_k + 1)] from the table."""
    mu = params.bulk_pmf
    ks = np.arange(mu.size)
    g = params.rate.table(mu.size)
    lhs = math.fsum(mu * g[: mu.size] * psi_single(ks))
    rhs = params.alpha * math.fsum(mu * psi_single(ks + 1))
    return lhs, rhs
