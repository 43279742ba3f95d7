"""Event-driven simulation of the environment seen from a tagged particle.

Two layers share one model description:

* ``SimState.step`` is a plain-Python stepper that literally applies
  ``move_particle`` / ``tagged_jump`` to a reference-frame
  ``Configuration``. It is slow and serves as the readable reference.
* ``run`` and ``run_ensemble`` drive the compiled loops in ``_engine``,
  which track the tagged particle in absolute coordinates instead of
  shifting the frame (the two are related by a relabelling of sites).

Replica ``r`` of a run with master seed ``s`` draws all of its randomness
from ``SeedSequence(s, spawn_key=(r,))``, so results do not depend on
chunking or on the number of worker threads.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import _engine
from .equilibrium import KIND_BULK, ENSEMBLES, ModelParams, equilibrium
from .errors import EmptySystem, EventBudgetExceeded
from .model import (
    Configuration,
    JumpKernel,
    LatticeSpec,
    RateFunction,
    move_particle,
    tagged_jump,
)

DEFAULT_MAX_EVENTS = 10**9
ENGINES = ("direct", "site-streams")


@dataclass(frozen=True, eq=False)
class Model:
    rate: RateFunction
    kernel: JumpKernel
    lattice: LatticeSpec
    params: ModelParams
    f_literal: bool = False
    max_events: int = DEFAULT_MAX_EVENTS
    _tables: dict = field(default_factory=dict, repr=False)

    @classmethod
    def build(cls, rate, kernel, lattice, alpha=None, rho=None,
              tail_tol=1e-12, f_literal=False, max_events=DEFAULT_MAX_EVENTS):
        lattice.check_kernel(kernel)
        params = equilibrium(rate, alpha=alpha, rho=rho, tail_tol=tail_tol)
        return cls(rate, kernel, lattice, params, f_literal, max_events)

    @property
    def alpha(self) -> float:
        return self.params.alpha

    @property
    def rho(self) -> float:
        return self.params.rho

    @property
    def speed(self) -> float:
        return self.params.speed

    @property
    def drift(self) -> np.ndarray:
        return self.kernel.drift

    @property
    def mean_velocity(self) -> np.ndarray:
        """E[x(t)] / t in equilibrium."""
        return self.speed * self.kernel.drift

    @property
    def diffusive_floor(self) -> float:
        """(alpha/rho) sum_j |j|^2 p(j), the martingale part of V(t)/t."""
        return self.speed * self.kernel.mean_square

    def tables(self, kcap: int):
        """g(k) and g(k)/k for k = 0..kcap."""
        hit = self._tables.get("g")
        if hit is None or hit[0].size <= kcap:
            kcap = max(kcap, 2 * (hit[0].size if hit else 0))
            gt = self.rate.table(kcap)
            ht = self.rate.per_particle_table(kcap)
            self._tables["g"] = hit = (gt, ht)
        return hit

    def with_lattice(self, lattice: LatticeSpec) -> "Model":
        lattice.check_kernel(self.kernel)
        return Model(self.rate, self.kernel, lattice, self.params,
                     self.f_literal, self.max_events)


# ---------------------------------------------------------------- python stepper


class SumTree:
    """Binary tree of partial sums over nonnegative leaf weights."""

    def __init__(self, weights):
        w = np.asarray(weights, dtype=float)
        self.n = w.size
        self.size = 1
        while self.size < self.n:
            self.size <<= 1
        self.tree = np.zeros(2 * self.size)
        self.rebuild(w)

    def rebuild(self, weights):
        self.tree[:] = 0.0
        self.tree[self.size : self.size + self.n] = weights
        for i in range(self.size - 1, 0, -1):
            self.tree[i] = self.tree[2 * i] + self.tree[2 * i + 1]

    @property
    def total(self) -> float:
        return float(self.tree[1])

    def leaf(self, i) -> float:
        return float(self.tree[self.size + i])

    def update(self, i, value):
        j = i + self.size
        self.tree[j] = value
        j >>= 1
        while j >= 1:
            self.tree[j] = self.tree[2 * j] + self.tree[2 * j + 1]
            j >>= 1

    def draw(self, u):
        """Leaf index for ``u`` uniform in [0, total)."""
        i = 1
        while i < self.size:
            left = 2 * i
            if u < self.tree[left]:
                i = left
            else:
                u -= self.tree[left]
                i = left + 1
        return i - self.size


@dataclass(frozen=True)
class Event:
    time: float
    site: tuple
    offset: tuple
    tagged: bool


class SimState:
    """Reference-frame configuration with its clock and rate index."""

    REBUILD_EVERY = 4096

    def __init__(self, config: Configuration, model: Model):
        if config.total_particles < 1:
            raise EmptySystem("no particles")
        if not config.reference_frame:
            config = Configuration(config.occupancy, reference_frame=True)
        self.config = config
        self.model = model
        self.clock = 0.0
        self.shift_counts = np.zeros(model.kernel.offsets.shape[0], dtype=np.int64)
        self.G = 0.0
        self._n_events = 0
        self.rate_index = SumTree(self._site_rates())

    def _site_rates(self):
        occ = self.config.occupancy.ravel()
        return np.array([self.model.rate(int(k)) for k in occ])

    @property
    def total_rate(self) -> float:
        return self.rate_index.total

    @property
    def x(self) -> np.ndarray:
        return self.shift_counts @ self.model.kernel.offsets

    def rebuild(self) -> float:
        """Rebuild the index exactly; returns the relative drift it removed."""
        old = self.rate_index.total
        self.rate_index.rebuild(self._site_rates())
        new = self.rate_index.total
        return abs(old - new) / new if new else 0.0

    def advance_compensator(self, dt):
        k0 = self.config.occupancy.flat[0]
        self.G += dt * self.model.rate(int(k0)) / k0

    def step(self, rng) -> Event:
        total = self.total_rate
        if not total > 0:
            raise EmptySystem("total rate is zero")
        dt = rng.exponential(1.0 / total)
        self.advance_compensator(dt)
        self.clock += dt
        lat = self.model.lattice
        site = self.rate_index.draw(rng.random() * total)
        occ = self.config.occupancy
        while occ.flat[site] == 0:
            site = self.rate_index.draw(rng.random() * total)
        kern = self.model.kernel
        m = int(np.searchsorted(kern.cdf, rng.random(), side="right"))
        j = tuple(int(c) for c in kern.offsets[m])
        coords = tuple(int(c) for c in lat.coords(site))
        tagged = site == 0 and rng.random() * occ.flat[0] < 1.0
        if tagged:
            self.config = tagged_jump(self.config, j)
            self.shift_counts[m] += 1
            self.rate_index.rebuild(self._site_rates())
        else:
            new = move_particle(self.config, coords, j)
            new.reference_frame = True
            self.config = new
            dest = lat.flat(np.add(coords, j))
            self.rate_index.update(site, self.model.rate(int(new.occupancy.flat[site])))
            self.rate_index.update(dest, self.model.rate(int(new.occupancy.flat[dest])))
        self._n_events += 1
        if self._n_events % self.REBUILD_EVERY == 0:
            self.rebuild()
        return Event(self.clock, coords, j, bool(tagged))


def step(state: SimState, model: Model, rng) -> Event:
    if state.model is not model:
        raise ValueError("state was built for a different model")
    return state.step(rng)


# ---------------------------------------------------------------- compiled runs


@dataclass(frozen=True, eq=False)
class TaggedTrajectory:
    """Checkpointed observables of one tagged particle.

    ``G`` is the exact time integral of g(eta_0)/eta_0; the compensator
    derived from it is in ``A``.
    """

    times: np.ndarray  # (C,)
    x: np.ndarray  # (C, d)
    G: np.ndarray  # (C,)
    A: np.ndarray  # (C, d)
    shift_counts: np.ndarray  # (C, m)
    offsets: np.ndarray  # (m, d)
    events: int

    def check_position(self) -> bool:
        return bool(np.array_equal(self.shift_counts @ self.offsets, self.x))


@dataclass(frozen=True, eq=False)
class EnsembleRun:
    """Checkpoint observables of many independent replicas."""

    model: Model
    times: np.ndarray  # (C,)
    x: np.ndarray  # (R, C, d)
    G: np.ndarray  # (R, C)
    shift_counts: np.ndarray  # (R, C, m)
    probes: np.ndarray  # (P, d) offsets from the tagged particle
    probe_values: np.ndarray  # (R, C, P)
    events: np.ndarray  # (R,)
    seed: int
    first_replica: int

    @property
    def n_replicas(self) -> int:
        return self.x.shape[0]

    @property
    def A(self) -> np.ndarray:
        return compensator(self.G, self.times, self.model)

    @property
    def M(self) -> np.ndarray:
        return martingale_parts(self, self.model)[0]

    def trajectory(self, r: int) -> TaggedTrajectory:
        return TaggedTrajectory(self.times, self.x[r], self.G[r], self.A[r],
                                self.shift_counts[r],
                                self.model.kernel.offsets, int(self.events[r]))

    def dump_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            write_jsonl(fh, self)


def compensator(G, times, model: Model) -> np.ndarray:
    """A(t) from the per-particle rate integral G(t).

    Default reading: drift * (G - (alpha/rho) t). With ``f_literal`` the
    centring constant is subtracted after multiplying by the drift.
    """
    G = np.asarray(G, dtype=float)
    t = np.asarray(times, dtype=float)
    drift = model.kernel.drift.astype(float)
    if model.f_literal:
        inner = G[..., None] * drift - model.speed * t[..., None]
    else:
        inner = (G - model.speed * t)[..., None] * drift
    return inner


def martingale_parts(traj, model: Model):
    """(M, A) with x - E[x] = M + A at each checkpoint."""
    A = compensator(traj.G, traj.times, model)
    mean = model.mean_velocity[None, :] * np.asarray(traj.times)[:, None]
    M = traj.x - mean - A
    return M, A


def replica_states(seed: int, first: int, count: int) -> np.ndarray:
    """Generator states for replicas first..first+count-1, shape (count, 4)."""
    out = np.empty((count, 4), dtype=np.uint64)
    for i in range(count):
        ss = np.random.SeedSequence(seed, spawn_key=(first + i,))
        out[i] = ss.generate_state(4, np.uint64)
    return out


def replica_keys(seed: int, first: int, count: int) -> np.ndarray:
    out = np.empty(count, dtype=np.uint64)
    for i in range(count):
        ss = np.random.SeedSequence(seed, spawn_key=(first + i,))
        out[i] = ss.generate_state(1, np.uint64)[0]
    return out


def configure_threads() -> int:
    """Apply ``ZRP_THREADS`` to the numba pool; returns the thread count."""
    import numba

    limit = numba.config.NUMBA_NUM_THREADS
    env = os.environ.get("ZRP_THREADS")
    n = limit
    if env:
        n = max(1, min(int(env), limit))
    numba.set_num_threads(n)
    return n


def _checkpoints(times, T):
    ck = np.asarray(sorted(float(t) for t in times), dtype=float)
    if ck.size and (ck[0] < 0 or ck[-1] > T):
        raise ValueError("checkpoint times must lie in [0, T]")
    if ck.size != len(set(ck.tolist())):
        raise ValueError("checkpoint times must be distinct")
    return ck


def _probes(probes, dim):
    if probes is None:
        return np.zeros((0, dim), dtype=np.int64)
    p = np.asarray(probes, dtype=np.int64)
    return p.reshape(-1, dim)


def _raise_status(status, events, first):
    bad = np.flatnonzero(status != _engine.OK)
    if bad.size == 0:
        return
    r = int(bad[0])
    if status[r] == _engine.EVENT_BUDGET:
        raise EventBudgetExceeded(
            f"replica {first + r} hit the event budget after {int(events[r])} events"
        )
    raise EmptySystem(f"replica {first + r} ran out of mobile particles")


def _kcap(model, init):
    if init is not None:
        return int(np.max(np.asarray(init).sum(axis=-1))) + 1
    n = model.lattice.n_sites
    return n * (model.params.K_max + 1) + 2


def run_ensemble(model: Model, T: float, checkpoint_times, n_replicas: int,
                 seed: int, ensemble: str = "Q", init=None, probes=None,
                 engine: str = "direct", first_replica: int = 0,
                 chunk: int = 1 << 14) -> EnsembleRun:
    """Simulate ``n_replicas`` replicas up to time ``T``.

    Initial states are drawn from the product measure ``ensemble`` (origin
    marginal palm, primed or bulk) unless ``init`` gives flat occupancy rows
    (one row shared by all replicas, or one per replica).
    """
    if n_replicas < 1:
        raise ValueError("need at least one replica")
    if engine not in ENGINES:
        raise ValueError(f"engine must be one of {ENGINES}")
    configure_threads()
    lat = model.lattice
    kern = model.kernel
    ck = _checkpoints(checkpoint_times, T)
    pr = _probes(probes, lat.dim)
    gtab, hgtab = model.tables(_kcap(model, init))
    nbr = lat.neighbor_table(kern)
    bulk = model.params.cdf(KIND_BULK)
    origin = model.params.cdf(ENSEMBLES[ensemble])
    if init is None:
        init_arr = np.zeros((1, lat.n_sites), dtype=np.int64)
        sample = True
    else:
        init_arr = np.atleast_2d(np.asarray(init, dtype=np.int64))
        if init_arr.shape[1] != lat.n_sites:
            raise ValueError("initial rows must have one entry per site")
        if init_arr.shape[0] not in (1, n_replicas):
            raise ValueError("give one initial row or one per replica")
        if np.any(init_arr[:, 0] < 1):
            raise ValueError("the tagged particle must start at the origin")
        sample = False
    order = lat.center_out_order()
    labels = lat.centered_coords()
    mult = lat.strides
    sides = lat.sides

    parts = []
    for start in range(0, n_replicas, chunk):
        cnt = min(chunk, n_replicas - start)
        rows = init_arr if init_arr.shape[0] == 1 else init_arr[start : start + cnt]
        first = first_replica + start
        if engine == "direct":
            seeds = replica_states(seed, first, cnt)
            out = _engine.run_batch(
                seeds, rows, sample, order, bulk, origin, nbr, kern.offsets,
                kern.cdf, gtab, hgtab, ck, float(T), pr, sides, mult,
                int(model.max_events),
            )
        else:
            keys = replica_keys(seed, first, cnt)
            out = _engine.run_batch_streams(
                keys, labels, rows, sample, bulk, origin, nbr, kern.offsets,
                kern.cdf, gtab, hgtab, ck, float(T), pr, sides, mult,
                int(model.max_events),
            )
        _raise_status(out[4], out[5], first)
        parts.append(out)
    xs, Gs, Ns, ps, _, ev = (np.concatenate(a) for a in zip(*parts))
    return EnsembleRun(model, ck, xs, Gs, Ns, pr, ps, ev, seed, first_replica)


def run(initial: Configuration, model: Model, T: float, checkpoint_times,
        seed: int, replica: int = 0, engine: str = "direct") -> TaggedTrajectory:
    """One trajectory from a given reference-frame configuration."""
    occ = np.asarray(initial.occupancy, dtype=np.int64)
    if occ.shape != model.lattice.shape:
        raise ValueError("configuration does not live on the model lattice")
    if initial.total_particles < 1 or occ.flat[0] < 1:
        raise EmptySystem("the tagged particle must sit at the origin")
    ens = run_ensemble(model, T, checkpoint_times, 1, seed, init=occ.ravel(),
                       first_replica=replica, engine=engine)
    return ens.trajectory(0)


# ---------------------------------------------------------------- output


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return float(v) if math.isfinite(v) else str(v)
    return int(v)


def write_jsonl(fh, ens: EnsembleRun) -> None:
    """One JSON object per (replica, checkpoint), in replica order."""
    A = ens.A
    offs = [",".join(str(int(c)) for c in o) for o in ens.model.kernel.offsets]
    for r in range(ens.n_replicas):
        for c, t in enumerate(ens.times):
            rec = {
                "replica": ens.first_replica + r,
                "t": _fmt(t),
                "x": [int(v) for v in ens.x[r, c]],
                "A": [_fmt(v) for v in A[r, c]],
                "N": {o: int(n) for o, n in zip(offs, ens.shift_counts[r, c])},
            }
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def initial_rows(model: Model, ensemble: str, n: int, rng) -> np.ndarray:
    """Host-side draws of flat initial occupancies (for tests and tooling)."""
    from .equilibrium import sample_configuration

    return sample_configuration(ensemble, model.lattice, model.params, rng, size=n)


__all__ = [
    "Model", "SimState", "SumTree", "Event", "TaggedTrajectory", "EnsembleRun",
    "step", "run", "run_ensemble", "martingale_parts", "compensator",
    "replica_states", "replica_keys", "configure_threads", "write_jsonl",
]
