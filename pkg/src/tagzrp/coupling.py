"""Monotone coupling of two tagged systems (d = 1, nearest-neighbour jumps to the right).

Both systems live in absolute coordinates on one torus. A single rate
index over sites, weighted by the total channel rate of each site, drives
the joint chain; the channel fired at the chosen site is picked from the
table in ``channels``. With the default table the site totals are
g(xi2_i), the rates of the dominating system.

Two tables are available for the site carrying the second tagged particle
when the tagged particles are apart:

``"matched"`` (default)
    every system-1 jump is paired with a system-2 jump, which keeps
    xi1 <= xi2 by construction.
``"literal"``
    the four-channel list with a system-1-only channel at rate
    g(a)/a - g(b)/b. Its site total is g(b) + g(a)/a - g(b)/b. That channel
    moves a system-1 particle alone and can break the site order; it is
    kept so the written rates can be reproduced and is exercised by the tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit, prange

from ._engine import _draw_cdf, _tree_build, _tree_draw, _tree_update, uniform
from .equilibrium import KIND_BULK, KIND_PALM, KIND_PRIMED, stochastically_dominated
from .errors import NegativeCouplingRate, OrderViolated, PreconditionError
from .simulator import Model, configure_threads, replica_states

VARIANTS = {"matched": 0, "literal": 1}

# regimes
GENERIC, AT_X1, AT_X2, AT_BOTH = 0, 1, 2, 3
# what a channel does to one system
NONE, OTHER, TAGGED = 0, 1, 2

# status codes
OK = 0
NEGATIVE_RATE = 1
ORDER_SITES = 2
ORDER_TAGGED = 3
EVENT_BUDGET = 4

NEG_TOL = 1e-12


@njit(cache=True)
def channels(a, b, regime, variant, gtab, htab, rates, m1, m2):
    """Fill the coupled channels of a site with xi1 = a, xi2 = b.

    Writes up to four (rate, move in system 1, move in system 2) triples
    and returns their number.
    """
    ga = gtab[a]
    gb = gtab[b]
    ha = htab[a]
    hb = htab[b]
    if regime == GENERIC:
        rates[0] = ga
        m1[0] = OTHER
        m2[0] = OTHER
        rates[1] = gb - ga
        m1[1] = NONE
        m2[1] = OTHER
        return 2
    if regime == AT_X1:
        rates[0] = ga - ha
        m1[0] = OTHER
        m2[0] = OTHER
        rates[1] = ha
        m1[1] = TAGGED
        m2[1] = OTHER
        rates[2] = gb - ga
        m1[2] = NONE
        m2[2] = OTHER
        return 3
    if regime == AT_X2:
        if a == 0:
            rates[0] = hb
            m1[0] = NONE
            m2[0] = TAGGED
            rates[1] = gb - hb
            m1[1] = NONE
            m2[1] = OTHER
            return 2
        if variant == 0:
            rates[0] = ga - hb
            m1[0] = OTHER
            m2[0] = OTHER
            rates[1] = hb
            m1[1] = OTHER
            m2[1] = TAGGED
            rates[2] = gb - ga
            m1[2] = NONE
            m2[2] = OTHER
            return 3
        rates[0] = ga - ha
        m1[0] = OTHER
        m2[0] = OTHER
        rates[1] = hb
        m1[1] = OTHER
        m2[1] = TAGGED
        rates[2] = ha - hb
        m1[2] = OTHER
        m2[2] = NONE
        rates[3] = (gb - hb) - (ga - ha)
        m1[3] = NONE
        m2[3] = OTHER
        return 4
    rates[0] = ga - ha
    m1[0] = OTHER
    m2[0] = OTHER
    rates[1] = hb
    m1[1] = TAGGED
    m2[1] = TAGGED
    rates[2] = ha - hb
    m1[2] = TAGGED
    m2[2] = OTHER
    rates[3] = gb - ga
    m1[3] = NONE
    m2[3] = OTHER
    return 4


@njit(cache=True, inline="always")
def _regime(site, s1, s2):
    if site == s1:
        return AT_BOTH if site == s2 else AT_X1
    if site == s2:
        return AT_X2
    return GENERIC


@njit(cache=True)
def _site_ok(xi1, xi2, site, s1, s2, variant, gtab, htab, rates, m1, m2):
    # returns the smallest channel rate at ``site`` (clamping tiny negatives)
    nc = channels(xi1[site], xi2[site], _regime(site, s1, s2), variant, gtab,
                  htab, rates, m1, m2)
    lo = np.inf
    for c in range(nc):
        if rates[c] < lo:
            lo = rates[c]
        if rates[c] < 0.0 and rates[c] > -NEG_TOL:
            rates[c] = 0.0
    return lo, nc


@njit(cache=True)
def _site_total(xi1, xi2, site, s1, s2, variant, gtab, htab, rates, m1, m2):
    nc = channels(xi1[site], xi2[site], _regime(site, s1, s2), variant, gtab,
                  htab, rates, m1, m2)
    tot = 0.0
    for c in range(nc):
        if rates[c] > 0.0:
            tot += rates[c]
    return tot


@njit(cache=True)
def _coupled_replica(rs, xi1, xi2, s1, s2, x1, x2, gtab, htab, ck, T, variant,
                     max_events, out_x1, out_x2, info):
    """Run one coupled pair; ``info`` gets (min x1-x2, event, site, min rate)."""
    n = xi1.shape[0]
    size = 1
    while size < n:
        size <<= 1
    rates = np.zeros(4)
    m1 = np.zeros(4, dtype=np.int64)
    m2 = np.zeros(4, dtype=np.int64)
    w = np.empty(n)
    for s in range(n):
        w[s] = _site_total(xi1, xi2, s, s1, s2, variant, gtab, htab, rates, m1, m2)
    tree = np.zeros(2 * size)
    _tree_build(tree, size, w)

    min_rate = np.inf
    for s in range(n):
        if xi1[s] > xi2[s]:
            info[1] = -1
            info[2] = s
            return ORDER_SITES, 0
        lo, _ = _site_ok(xi1, xi2, s, s1, s2, variant, gtab, htab, rates, m1, m2)
        if lo < min_rate:
            min_rate = lo
    if min_rate < -NEG_TOL:
        info[3] = min_rate
        return NEGATIVE_RATE, 0
    if x1 < x2:
        return ORDER_TAGGED, 0
    gap_min = x1 - x2
    t = 0.0
    ci = 0
    nck = ck.shape[0]
    events = 0
    while True:
        total = tree[1]
        tn = t + -np.log(1.0 - uniform(rs)) / total
        while ci < nck and ck[ci] <= tn:
            out_x1[ci] = x1
            out_x2[ci] = x2
            ci += 1
        if tn >= T:
            break
        t = tn
        site = _tree_draw(tree, size, uniform(rs) * total)
        while xi2[site] == 0:
            site = _tree_draw(tree, size, uniform(rs) * total)
        lo, nc = _site_ok(xi1, xi2, site, s1, s2, variant, gtab, htab, rates,
                          m1, m2)
        u = uniform(rs) * tree[size + site]
        c = 0
        acc = rates[0]
        while c < nc - 1 and u >= acc:
            c += 1
            acc += rates[c]
        while rates[c] <= 0.0 and c > 0:
            c -= 1
        dest = site + 1
        if dest == n:
            dest = 0
        if m1[c] != NONE:
            xi1[site] -= 1
            xi1[dest] += 1
            if m1[c] == TAGGED:
                s1 = dest
                x1 += 1
        if m2[c] != NONE:
            xi2[site] -= 1
            xi2[dest] += 1
            if m2[c] == TAGGED:
                s2 = dest
                x2 += 1
        events += 1
        # only the two touched sites can change order or rates
        for s in (site, dest):
            if xi1[s] > xi2[s] or xi1[s] < 0:
                info[0] = gap_min
                info[1] = events
                info[2] = s
                return ORDER_SITES, events
            lo, _ = _site_ok(xi1, xi2, s, s1, s2, variant, gtab, htab, rates,
                             m1, m2)
            if lo < min_rate:
                min_rate = lo
            if lo < -NEG_TOL:
                info[0] = gap_min
                info[1] = events
                info[2] = s
                info[3] = lo
                return NEGATIVE_RATE, events
            _tree_update(tree, size, s, _site_total(xi1, xi2, s, s1, s2, variant,
                                                    gtab, htab, rates, m1, m2))
        if x1 - x2 < gap_min:
            gap_min = x1 - x2
        if x1 < x2:
            info[0] = gap_min
            info[1] = events
            info[2] = s2
            return ORDER_TAGGED, events
        if events >= max_events:
            info[0] = gap_min
            return EVENT_BUDGET, events
    for s in range(n):
        if xi1[s] > xi2[s]:
            info[0] = gap_min
            info[1] = events
            info[2] = s
            return ORDER_SITES, events
    info[0] = gap_min
    info[1] = events
    info[2] = -1
    info[3] = min_rate
    return OK, events


@njit(cache=True, parallel=True)
def coupled_batch(seeds, init1, init2, sample_init, bulk_cdf, origin1_cdf,
                  origin2_cdf, n_sites, s1, s2, x1, x2, gtab, htab, ck, T,
                  variant, max_events):
    """Independent coupled pairs; origin counts share one uniform (quantile coupling)."""
    R = seeds.shape[0]
    nck = ck.shape[0]
    X1 = np.zeros((R, nck), dtype=np.int64)
    X2 = np.zeros((R, nck), dtype=np.int64)
    info = np.zeros((R, 4))
    status = np.zeros(R, dtype=np.int64)
    events = np.zeros(R, dtype=np.int64)
    for r in prange(R):
        rs = seeds[r].copy()
        xi1 = np.empty(n_sites, dtype=np.int64)
        xi2 = np.empty(n_sites, dtype=np.int64)
        if sample_init:
            u = uniform(rs)
            xi1[0] = _draw_cdf(origin1_cdf, u)
            xi2[0] = _draw_cdf(origin2_cdf, u)
            for s in range(1, n_sites):
                k = _draw_cdf(bulk_cdf, uniform(rs))
                xi1[s] = k
                xi2[s] = k
        else:
            if init1.shape[0] == 1:
                xi1[:] = init1[0]
                xi2[:] = init2[0]
            else:
                xi1[:] = init1[r]
                xi2[:] = init2[r]
        st, ev = _coupled_replica(rs, xi1, xi2, s1, s2, x1, x2, gtab, htab, ck,
                                  T, variant, max_events, X1[r], X2[r], info[r])
        status[r] = st
        events[r] = ev
    return X1, X2, info, status, events


# ---------------------------------------------------------------- python layer


def check_model(model: Model) -> None:
    if not model.kernel.is_totally_asymmetric_nn:
        raise PreconditionError("the coupling needs d = 1 and p(1) = 1")
    if not model.rate.is_id:
        raise PreconditionError("the coupling needs a rate with g increasing and g(k)/k decreasing")


@dataclass
class CoupledState:
    """Two configurations in absolute coordinates with their tagged positions."""

    xi1: np.ndarray
    xi2: np.ndarray
    x1: int
    x2: int
    clock: float = 0.0

    @property
    def site1(self) -> int:
        return self.x1 % self.xi1.size

    @property
    def site2(self) -> int:
        return self.x2 % self.xi2.size

    def check(self) -> None:
        if np.any(self.xi1 > self.xi2):
            i = int(np.flatnonzero(self.xi1 > self.xi2)[0])
            raise OrderViolated(f"xi1 > xi2 at site {i}")
        if self.x1 < self.x2:
            raise OrderViolated(f"x1 = {self.x1} < x2 = {self.x2}")
        if self.xi1[self.site1] < 1 or self.xi2[self.site2] < 1:
            raise OrderViolated("a tagged particle sits on an empty site")


@dataclass(frozen=True)
class CoupledEvent:
    time: float
    site: int
    move1: int
    move2: int


def _tables(model, kmax):
    gt, ht = model.tables(kmax)
    return gt, ht


def site_channels(model: Model, a: int, b: int, regime: int, variant="matched"):
    """The coupled channel list at one site as [(rate, move1, move2), ...]."""
    gt, ht = _tables(model, max(a, b) + 1)
    rates = np.zeros(4)
    m1 = np.zeros(4, dtype=np.int64)
    m2 = np.zeros(4, dtype=np.int64)
    nc = channels(a, b, regime, VARIANTS[variant], gt, ht, rates, m1, m2)
    return [(float(rates[c]), int(m1[c]), int(m2[c])) for c in range(nc)]


def coupled_step(state: CoupledState, model: Model, rng, variant="matched") -> CoupledEvent:
    """One event of the coupled chain, drawn with a numpy Generator."""
    n = state.xi2.size
    gt, ht = _tables(model, int(state.xi2.sum()) + 1)
    s1, s2 = state.site1, state.site2

    def regime(site):
        return (AT_BOTH if site == s2 else AT_X1) if site == s1 else (
            AT_X2 if site == s2 else GENERIC)

    # site totals are g(xi2) except where the table says otherwise
    w = gt[state.xi2].copy()
    for s in {s1, s2}:
        w[s] = sum(max(r, 0.0) for r, _, _ in site_channels(
            model, int(state.xi1[s]), int(state.xi2[s]), regime(s), variant))
    total = w.sum()
    state.clock += rng.exponential(1.0 / total)
    site = int(np.searchsorted(np.cumsum(w), rng.random() * total, side="right"))
    site = min(site, n - 1)
    table = site_channels(model, int(state.xi1[site]), int(state.xi2[site]),
                          regime(site), variant)
    lo = min(r for r, _, _ in table)
    if lo < -NEG_TOL:
        raise NegativeCouplingRate(f"rate {lo} at site {site}, regime {regime}")
    r = np.array([max(c[0], 0.0) for c in table])
    c = int(np.searchsorted(np.cumsum(r), rng.random() * r.sum(), side="right"))
    c = min(c, len(table) - 1)
    _, mv1, mv2 = table[c]
    dest = (site + 1) % n
    if mv1:
        state.xi1[site] -= 1
        state.xi1[dest] += 1
        state.x1 += mv1 == TAGGED
    if mv2:
        state.xi2[site] -= 1
        state.xi2[dest] += 1
        state.x2 += mv2 == TAGGED
    state.check()
    return CoupledEvent(state.clock, site, mv1, mv2)


@dataclass(frozen=True, eq=False)
class CoupledRun:
    times: np.ndarray
    x1: np.ndarray  # (R, C)
    x2: np.ndarray  # (R, C)
    min_gap: np.ndarray  # (R,) min over events of x1 - x2
    min_rate: np.ndarray  # (R,) smallest channel rate seen
    status: np.ndarray
    events: np.ndarray
    violation_event: np.ndarray
    violation_site: np.ndarray

    @property
    def violations(self) -> int:
        return int(np.count_nonzero(self.status != OK))

    def first_violation(self):
        bad = np.flatnonzero(self.status != OK)
        if bad.size == 0:
            return None
        r = int(bad[0])
        return {
            "replica": r,
            "kind": {NEGATIVE_RATE: "negative-rate", ORDER_SITES: "site-order",
                     ORDER_TAGGED: "tagged-order", EVENT_BUDGET: "event-budget"}[
                int(self.status[r])],
            "event": int(self.violation_event[r]),
            "site": int(self.violation_site[r]),
        }


def _pack(ck, out):
    X1, X2, info, status, events = out
    return CoupledRun(ck, X1, X2, info[:, 0].astype(np.int64), info[:, 3], status,
                      events, info[:, 1].astype(np.int64), info[:, 2].astype(np.int64))


def _ck(times, T):
    ck = np.asarray(sorted(float(t) for t in times), dtype=float)
    if ck.size and (ck[0] < 0 or ck[-1] > T):
        raise ValueError("checkpoint times must lie in [0, T]")
    return ck


def run_coupled(init1, init2, model: Model, T: float, seed: int, x1: int = 0,
                x2: int = 0, checkpoint_times=None, variant="matched",
                replica: int = 0, strict: bool = True) -> CoupledRun:
    """One coupled pair from explicit absolute configurations."""
    check_model(model)
    xi1 = np.asarray(init1, dtype=np.int64).ravel()
    xi2 = np.asarray(init2, dtype=np.int64).ravel()
    n = xi1.size
    if xi2.size != n:
        raise ValueError("configurations differ in size")
    if np.any(xi1 > xi2) or x1 < x2:
        raise OrderViolated("initial states are not ordered")
    if xi1[x1 % n] < 1 or xi2[x2 % n] < 1:
        raise ValueError("tagged particles must sit on occupied sites")
    ck = _ck([T] if checkpoint_times is None else checkpoint_times, T)
    gt, ht = model.tables(int(xi2.sum()) + 1)
    seeds = replica_states(seed, replica, 1)
    dummy = np.ones(1)
    out = coupled_batch(seeds, xi1[None], xi2[None], False, dummy, dummy, dummy,
                        n, x1 % n, x2 % n, x1, x2, gt, ht, ck, float(T),
                        VARIANTS[variant], int(model.max_events))
    res = _pack(ck, out)
    if strict:
        _raise(res)
    return res


def _raise(res: CoupledRun):
    v = res.first_violation()
    if v is None:
        return
    if v["kind"] == "negative-rate":
        raise NegativeCouplingRate(str(v))
    raise OrderViolated(str(v))


def run_coupled_ensemble(model: Model, T: float, n_replicas: int, seed: int,
                         origin: str = "extra", checkpoint_times=None,
                         variant="matched", first_replica: int = 0,
                         strict: bool = False) -> CoupledRun:
    """Coupled pairs started from a shared product configuration.

    ``origin`` selects the origin counts (system 1, system 2):

    ``"extra"``    palm draw k and k + 1: system 2 has one extra particle there
    ``"primed"``   primed and palm draws from one uniform (primed <= palm)
    ``"same"``     one palm draw used by both systems
    """
    check_model(model)
    configure_threads()
    p = model.params
    bulk = p.cdf(KIND_BULK)
    palm = p.cdf(KIND_PALM)
    if origin == "extra":
        o1, o2 = palm, np.concatenate([[0.0], palm])
    elif origin == "primed":
        o1, o2 = p.cdf(KIND_PRIMED), palm
        if not stochastically_dominated(o1, o2):
            raise PreconditionError("primed origin law is not below the palm law")
    elif origin == "same":
        o1 = o2 = palm
    else:
        raise ValueError(f"unknown origin coupling {origin!r}")
    n = model.lattice.n_sites
    ck = _ck([T] if checkpoint_times is None else checkpoint_times, T)
    gt, ht = model.tables(n * (p.K_max + 1) + 3)
    seeds = replica_states(seed, first_replica, n_replicas)
    dummy = np.zeros((1, n), dtype=np.int64)
    out = coupled_batch(seeds, dummy, dummy, True, bulk, o1, o2, n, 0, 0, 0, 0,
                        gt, ht, ck, float(T), VARIANTS[variant],
                        int(model.max_events))
    res = _pack(ck, out)
    if strict:
        _raise(res)
    return res


@dataclass(frozen=True)
class GapCurve:
    times: np.ndarray
    mean_gap: np.ndarray
    se: np.ndarray
    min_gap: int
    n_replicas: int
    violations: int


def primed_comparison(model: Model, T: float, n_replicas: int, seed: int,
                      checkpoint_times=None) -> GapCurve:
    """Mean of x_{Q'}(t) - x_Q(t) over coupled pairs.

    System 1 starts from the primed origin law, system 2 from the palm law;
    everything else is shared. Because the palm origin is stochastically
    larger, its tagged particle is the slower one and the gap is >= 0.
    """
    res = run_coupled_ensemble(model, T, n_replicas, seed, origin="primed",
                               checkpoint_times=checkpoint_times)
    gap = (res.x1 - res.x2).astype(float)
    n = gap.shape[0]
    se = gap.std(axis=0, ddof=1) / np.sqrt(n) if n > 1 else np.full(gap.shape[1], np.nan)
    return GapCurve(res.times, gap.mean(axis=0), se, int(res.min_gap.min()),
                    n, res.violations)
