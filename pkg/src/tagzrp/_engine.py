"""Compiled event loops for the tagged zero-range dynamics.

Everything here works on flat arrays so numba can compile it. Sites of the
torus are flattened row-major; ``nbr[i, m]`` is the site reached from ``i``
by the ``m``-th kernel offset. Rates are looked up from a table ``gtab``
indexed by occupancy, so a rate expression is evaluated once per model and
never inside the loop.

The tagged particle is tracked in absolute coordinates (``tsite`` plus the
unwrapped displacement ``x``). This is the reference-frame process read
through the map eta_k = xi_{k + x}; a tagged jump therefore costs O(1)
instead of a full frame shift.
"""

import math
import os

import numpy as np
import numba
from numba import njit, prange

if "NUMBA_THREADING_LAYER" not in os.environ:
    # skip the TBB probe (and its version warning) when OpenMP is present
    numba.config.THREADING_LAYER_PRIORITY = ["omp", "tbb", "workqueue"]

# status codes returned per replica
OK = 0
EVENT_BUDGET = 1
EMPTY_SYSTEM = 2

_INV53 = 1.0 / 9007199254740992.0


@njit(cache=True, inline="always")
def _rotl(x, k):
    return (x << np.uint64(k)) | (x >> np.uint64(64 - k))


@njit(cache=True, inline="always")
def uniform(s):
    """xoshiro256** step on the 4-word state ``s``; returns a double in [0, 1)."""
    result = _rotl(s[1] * np.uint64(5), 7) * np.uint64(9)
    t = s[1] << np.uint64(17)
    s[2] ^= s[0]
    s[3] ^= s[1]
    s[1] ^= s[2]
    s[0] ^= s[3]
    s[2] ^= t
    s[3] = _rotl(s[3], 45)
    return (result >> np.uint64(11)) * _INV53


@njit(cache=True, inline="always")
def _tree_update(tree, size, site, value):
    i = site + size
    tree[i] = value
    i >>= 1
    while i >= 1:
        tree[i] = tree[2 * i] + tree[2 * i + 1]
        i >>= 1


@njit(cache=True)
def _tree_build(tree, size, weights):
    tree[:] = 0.0
    for s in range(weights.shape[0]):
        tree[size + s] = weights[s]
    for i in range(size - 1, 0, -1):
        tree[i] = tree[2 * i] + tree[2 * i + 1]


@njit(cache=True, inline="always")
def _tree_draw(tree, size, u):
    i = 1
    while i < size:
        left = 2 * i
        if u < tree[left]:
            i = left
        else:
            u -= tree[left]
            i = left + 1
    return i - size


@njit(cache=True, inline="always")
def _draw_cdf(cdf, u):
    # smallest k with cdf[k] > u; cdf[-1] == 1 so the loop terminates
    lo = 0
    hi = cdf.shape[0] - 1
    while lo < hi:
        mid = (lo + hi) >> 1
        if cdf[mid] > u:
            hi = mid
        else:
            lo = mid + 1
    return lo


@njit(cache=True)
def _site_of(xvec, offset, sides, mult):
    s = 0
    for a in range(xvec.shape[0]):
        c = (xvec[a] + offset[a]) % sides[a]
        if c < 0:
            c += sides[a]
        s += c * mult[a]
    return s


@njit(cache=True)
def _one_replica(rs, occ, nbr, offsets, jcdf, gtab, hgtab, ck, T, probes,
                 sides, mult, max_events, out_x, out_G, out_N, out_probe):
    n = occ.shape[0]
    d = offsets.shape[1]
    size = 1
    while size < n:
        size <<= 1
    tree = np.zeros(2 * size)
    w = np.empty(n)
    for s in range(n):
        w[s] = gtab[occ[s]]
    _tree_build(tree, size, w)

    nck = ck.shape[0]
    x = np.zeros(d, dtype=np.int64)
    counts = np.zeros(offsets.shape[0], dtype=np.int64)
    tsite = 0
    t = 0.0
    G = 0.0
    ci = 0
    events = 0
    while True:
        total = tree[1]
        if total <= 0.0:
            return EMPTY_SYSTEM, events
        dt = -math.log(1.0 - uniform(rs)) / total
        h = hgtab[occ[tsite]]
        tn = t + dt
        while ci < nck and ck[ci] <= tn:
            G += (ck[ci] - t) * h
            t = ck[ci]
            for a in range(d):
                out_x[ci, a] = x[a]
            out_G[ci] = G
            for m in range(counts.shape[0]):
                out_N[ci, m] = counts[m]
            for p in range(probes.shape[0]):
                out_probe[ci, p] = occ[_site_of(x, probes[p], sides, mult)]
            ci += 1
        if tn >= T:
            return OK, events
        G += (tn - t) * h
        t = tn
        site = _tree_draw(tree, size, uniform(rs) * total)
        while occ[site] == 0:
            # rounding can land on an empty leaf at a boundary; redraw
            site = _tree_draw(tree, size, uniform(rs) * total)
        m = _draw_cdf(jcdf, uniform(rs))
        dest = nbr[site, m]
        if site == tsite and uniform(rs) * occ[site] < 1.0:
            for a in range(d):
                x[a] += offsets[m, a]
            counts[m] += 1
            tsite = dest
        occ[site] -= 1
        occ[dest] += 1
        _tree_update(tree, size, site, gtab[occ[site]])
        _tree_update(tree, size, dest, gtab[occ[dest]])
        events += 1
        if events >= max_events:
            return EVENT_BUDGET, events


@njit(cache=True)
def _sample_occupancy(rs, occ, order, bulk_cdf, origin_cdf):
    for idx in range(order.shape[0]):
        s = order[idx]
        if s == 0:
            occ[s] = _draw_cdf(origin_cdf, uniform(rs))
        else:
            occ[s] = _draw_cdf(bulk_cdf, uniform(rs))


@njit(cache=True, parallel=True)
def run_batch(seeds, init, sample_init, order, bulk_cdf, origin_cdf, nbr,
              offsets, jcdf, gtab, hgtab, ck, T, probes, sides, mult,
              max_events):
    """Run ``len(seeds)`` independent replicas.

    ``seeds`` holds one 4-word generator state per replica, so outcomes do
    not depend on how replicas are spread over threads. When
    ``sample_init`` is true the initial occupancies are drawn site by site
    in ``order`` (origin from ``origin_cdf``); otherwise row ``r`` of
    ``init`` (or row 0 if ``init`` has a single row) is copied.
    """
    R = seeds.shape[0]
    n = nbr.shape[0]
    d = offsets.shape[1]
    nck = ck.shape[0]
    xs = np.zeros((R, nck, d), dtype=np.int64)
    Gs = np.zeros((R, nck))
    Ns = np.zeros((R, nck, offsets.shape[0]), dtype=np.int64)
    ps = np.zeros((R, nck, probes.shape[0]), dtype=np.int64)
    status = np.zeros(R, dtype=np.int64)
    events = np.zeros(R, dtype=np.int64)
    for r in prange(R):
        rs = seeds[r].copy()
        occ = np.empty(n, dtype=np.int64)
        if sample_init:
            _sample_occupancy(rs, occ, order, bulk_cdf, origin_cdf)
        elif init.shape[0] == 1:
            occ[:] = init[0]
        else:
            occ[:] = init[r]
        st, ev = _one_replica(rs, occ, nbr, offsets, jcdf, gtab, hgtab, ck, T,
                              probes, sides, mult, max_events, xs[r], Gs[r],
                              Ns[r], ps[r])
        status[r] = st
        events[r] = ev
    return xs, Gs, Ns, ps, status, events


# ---------------------------------------------------------------------------
# Per-site streams (next-reaction method).
#
# Every site owns a unit-rate Poisson clock in its own internal time and its
# own generator, keyed by (replica key, centered site coordinates). Holding
# times are rescaled when a site's rate changes and parked while it is empty.
# A run on a torus of side L and one of side 2L therefore consume identical
# random numbers at every site they share, so their outputs differ only
# through genuine finite-size effects.


@njit(cache=True, inline="always")
def _splitmix(x):
    x = x + np.uint64(0x9E3779B97F4A7C15)
    z = x
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31)), x


@njit(cache=True)
def site_state(key, label):
    """4-word generator state for the site with centered coordinates ``label``."""
    h = key
    for a in range(label.shape[0]):
        h, _ = _splitmix(h ^ np.uint64(label[a] + 1_000_003 * (a + 1)))
    s = np.empty(4, dtype=np.uint64)
    x = h
    for w in range(4):
        s[w], x = _splitmix(x)
    return s


@njit(cache=True, inline="always")
def _min_update(tree, size, site, value):
    i = site + size
    tree[i] = value
    i >>= 1
    while i >= 1:
        a = tree[2 * i]
        b = tree[2 * i + 1]
        tree[i] = a if a <= b else b
        i >>= 1


@njit(cache=True, inline="always")
def _min_argmin(tree, size):
    i = 1
    while i < size:
        if tree[2 * i] <= tree[2 * i + 1]:
            i = 2 * i
        else:
            i = 2 * i + 1
    return i - size


@njit(cache=True)
def _one_replica_streams(key, labels, sample_init, init_row, bulk_cdf,
                         origin_cdf, nbr, offsets, jcdf, gtab, hgtab, ck, T,
                         probes, sides, mult, max_events, out_x, out_G, out_N,
                         out_probe):
    n = nbr.shape[0]
    d = offsets.shape[1]
    rs = np.empty((n, 4), dtype=np.uint64)
    occ = np.empty(n, dtype=np.int64)
    for s in range(n):
        rs[s] = site_state(key, labels[s])
        if sample_init:
            cdf = origin_cdf if s == 0 else bulk_cdf
            occ[s] = _draw_cdf(cdf, uniform(rs[s]))
        else:
            occ[s] = init_row[s]
    size = 1
    while size < n:
        size <<= 1
    tree = np.full(2 * size, np.inf)
    rem = np.zeros(n)
    for s in range(n):
        e = -math.log(1.0 - uniform(rs[s]))
        a = gtab[occ[s]]
        if a > 0.0:
            _min_update(tree, size, s, e / a)
        else:
            rem[s] = e

    nck = ck.shape[0]
    x = np.zeros(d, dtype=np.int64)
    counts = np.zeros(offsets.shape[0], dtype=np.int64)
    tsite = 0
    t = 0.0
    G = 0.0
    ci = 0
    events = 0
    while True:
        tn = tree[1]
        if tn == np.inf:
            return EMPTY_SYSTEM, events
        h = hgtab[occ[tsite]]
        while ci < nck and ck[ci] <= tn:
            G += (ck[ci] - t) * h
            t = ck[ci]
            for a in range(d):
                out_x[ci, a] = x[a]
            out_G[ci] = G
            for m in range(counts.shape[0]):
                out_N[ci, m] = counts[m]
            for p in range(probes.shape[0]):
                out_probe[ci, p] = occ[_site_of(x, probes[p], sides, mult)]
            ci += 1
        if tn >= T:
            return OK, events
        G += (tn - t) * h
        t = tn
        site = _min_argmin(tree, size)
        srs = rs[site]
        m = _draw_cdf(jcdf, uniform(srs))
        dest = nbr[site, m]
        if site == tsite and uniform(srs) * occ[site] < 1.0:
            for a in range(d):
                x[a] += offsets[m, a]
            counts[m] += 1
            tsite = dest
        a_dest = gtab[occ[dest]]
        occ[site] -= 1
        occ[dest] += 1
        e = -math.log(1.0 - uniform(srs))
        a = gtab[occ[site]]
        if a > 0.0:
            _min_update(tree, size, site, t + e / a)
        else:
            rem[site] = e
            _min_update(tree, size, site, np.inf)
        b = gtab[occ[dest]]
        if a_dest > 0.0:
            _min_update(tree, size, dest, t + (a_dest / b) * (tree[size + dest] - t))
        else:
            _min_update(tree, size, dest, t + rem[dest] / b)
        events += 1
        if events >= max_events:
            return EVENT_BUDGET, events


@njit(cache=True, parallel=True)
def run_batch_streams(keys, labels, init, sample_init, bulk_cdf, origin_cdf,
                      nbr, offsets, jcdf, gtab, hgtab, ck, T, probes, sides,
                      mult, max_events):
    """Per-site-stream counterpart of ``run_batch``; ``keys`` has one word per replica."""
    R = keys.shape[0]
    d = offsets.shape[1]
    nck = ck.shape[0]
    xs = np.zeros((R, nck, d), dtype=np.int64)
    Gs = np.zeros((R, nck))
    Ns = np.zeros((R, nck, offsets.shape[0]), dtype=np.int64)
    ps = np.zeros((R, nck, probes.shape[0]), dtype=np.int64)
    status = np.zeros(R, dtype=np.int64)
    events = np.zeros(R, dtype=np.int64)
    for r in prange(R):
        row = init[0] if init.shape[0] == 1 else init[r]
        st, ev = _one_replica_streams(keys[r], labels, sample_init, row,
                                      bulk_cdf, origin_cdf, nbr, offsets,
                                      jcdf, gtab, hgtab, ck, T, probes, sides,
                                      mult, max_events, xs[r], Gs[r], Ns[r],
                                      ps[r])
        status[r] = st
        events[r] = ev
    return xs, Gs, Ns, ps, status, events
