"""Rates, jump kernels, lattices and configurations."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Tuple

import numpy as np

from .errors import (
    DomainError,
    EmptySource,
    KernelError,
    NegativeRate,
    NonzeroAtZero,
    NotNormalized,
    ReducibleSymmetrization,
    ZeroAtPositive,
    ZeroOffsetMass,
)
from .ratexpr import RateExpr, parse_rate_expr

_REL = 1e-12


# ---------------------------------------------------------------- rates


@dataclass(frozen=True, eq=False)
class RateFunction:
    """A validated rate g with the structural facts probed on 0..probe_max.

    ``values`` is evaluated lazily beyond the probe range: expressions are
    evaluated on demand, tables hold their last entry constant.
    """

    source: object
    probe_max: int
    probe_values: np.ndarray
    lipschitz_bound: float
    liminf_estimate: float
    is_id: bool
    gap_class: Optional[Tuple[int, float]]
    _eval: Callable[[int], float] = field(repr=False, compare=False)

    def __call__(self, k: int) -> float:
        if k <= self.probe_max:
            return float(self.probe_values[k])
        value = self._eval(int(k))
        if value < 0.0 or not math.isfinite(value):
            raise NegativeRate(f"g({k}) = {value}")
        return value

    def table(self, kmax: int) -> np.ndarray:
        """g(0..kmax) as a float array."""
        if kmax <= self.probe_max:
            return self.probe_values[: kmax + 1].copy()
        extra = [self(k) for k in range(self.probe_max + 1, kmax + 1)]
        return np.concatenate([self.probe_values, np.asarray(extra, dtype=float)])

    def per_particle_table(self, kmax: int) -> np.ndarray:
        """g(k)/k for k = 0..kmax, with 0 at k = 0."""
        gt = self.table(kmax)
        out = np.zeros_like(gt)
        out[1:] = gt[1:] / np.arange(1, kmax + 1)
        return out

    @property
    def text(self) -> str:
        if isinstance(self.source, RateExpr):
            return self.source.text
        return repr(self.source)

    @property
    def per_particle_constant(self) -> bool:
        """True when g(k)/k does not depend on k (independent-walk case)."""
        h = self.per_particle_table(self.probe_max)[1:]
        return bool(np.all(np.abs(h - h[0]) <= _REL * abs(h[0])))

    @property
    def max_probed(self) -> float:
        return float(self.probe_values.max())


def _as_evaluator(spec):
    if isinstance(spec, str):
        spec = parse_rate_expr(spec)
    if isinstance(spec, RateExpr):
        return spec, spec.raw
    if callable(spec):
        return spec, lambda k: float(spec(k))
    table = np.asarray(spec, dtype=float)
    if table.ndim != 1 or table.size == 0:
        raise ValueError("rate table must be a nonempty 1-d sequence")
    last = float(table[-1])

    def from_table(k):
        return float(table[k]) if k < table.size else last

    return tuple(table.tolist()), from_table


def validate_rate(spec, probe_max: int = 64) -> RateFunction:
    """Validate a rate given as expression text, RateExpr, callable or table."""
    if probe_max < 8:
        raise ValueError("probe_max must be at least 8")
    source, ev = _as_evaluator(spec)
    vals = np.empty(probe_max + 1)
    for k in range(probe_max + 1):
        try:
            v = ev(k)
        except DomainError as exc:
            raise NegativeRate(f"g({k}) is undefined: {exc}") from exc
        if not math.isfinite(v):
            raise NegativeRate(f"g({k}) = {v} is not finite")
        vals[k] = v
    if vals[0] != 0.0:
        raise NonzeroAtZero(f"g(0) = {vals[0]}, must be 0")
    neg = np.flatnonzero(vals < 0)
    if neg.size:
        k = int(neg[0])
        raise NegativeRate(f"g({k}) = {vals[k]} < 0")
    zero = np.flatnonzero(vals[1:] == 0)
    if zero.size:
        raise ZeroAtPositive(f"g({int(zero[0]) + 1}) = 0")

    lip = float(np.max(np.abs(np.diff(vals))))
    tail = vals[probe_max // 2 :]
    liminf = float(tail.min())
    ks = np.arange(1, probe_max + 1)
    inc = np.all(np.diff(vals[1:]) >= -_REL * np.abs(vals[2:]))
    per = vals[1:] / ks
    dec = np.all(np.diff(per) <= _REL * per[:-1])
    return RateFunction(
        source=source,
        probe_max=probe_max,
        probe_values=vals,
        lipschitz_bound=lip,
        liminf_estimate=liminf,
        is_id=bool(inc and dec),
        gap_class=_gap_class(vals),
        _eval=ev,
    )


def _gap_class(vals):
    # smallest a with inf_k g(k+a) - g(k) > 0 over the probe range
    n = vals.size
    for a in range(1, max(2, n // 4) + 1):
        b = float(np.min(vals[a:] - vals[:-a]))
        if b > 0:
            return a, b
    return None


# ---------------------------------------------------------------- kernels


def _offset_tuple(off, dim):
    if isinstance(off, (int, np.integer)):
        t = (int(off),)
    else:
        t = tuple(int(c) for c in off)
    if len(t) != dim:
        raise KernelError(f"offset {off!r} does not have dimension {dim}")
    return t


def _lattice_rank_one(vectors, dim):
    """True iff the integer vectors generate Z^dim as a group."""
    rows = [list(v) for v in vectors if any(v)]
    basis = []
    for col in range(dim):
        pivot_rows = [r for r in rows if r[col] != 0]
        if not pivot_rows:
            return False
        # euclid on the column until a single row carries it
        while len(pivot_rows) > 1:
            pivot_rows.sort(key=lambda r: abs(r[col]))
            p = pivot_rows[0]
            for r in pivot_rows[1:]:
                q = r[col] // p[col]
                for c in range(dim):
                    r[c] -= q * p[c]
            pivot_rows = [r for r in pivot_rows if r[col] != 0]
        p = pivot_rows[0]
        basis.append(p)
        rows = [r for r in rows if r is not p]
    det = 1
    for i, r in enumerate(basis):
        det *= r[i]
    return abs(det) == 1


@dataclass(frozen=True, eq=False)
class JumpKernel:
    dim: int
    offsets: np.ndarray  # (m, dim) int64
    probs: np.ndarray  # (m,)

    @property
    def range(self) -> int:
        """Smallest R with p(j) = 0 for |j|_inf >= R."""
        return int(np.abs(self.offsets).max()) + 1

    @property
    def max_step(self) -> int:
        return int(np.abs(self.offsets).max())

    @property
    def drift(self) -> np.ndarray:
        return self.probs @ self.offsets

    @property
    def second_moment_matrix(self) -> np.ndarray:
        o = self.offsets.astype(float)
        return (o * self.probs[:, None]).T @ o

    @property
    def mean_square(self) -> float:
        """sum_j |j|^2 p(j)."""
        return float(np.trace(self.second_moment_matrix))

    @property
    def cdf(self) -> np.ndarray:
        c = np.cumsum(self.probs)
        c[-1] = 1.0
        return c

    def entries(self) -> dict:
        return {
            (tuple(int(c) for c in o) if self.dim > 1 else int(o[0])): float(p)
            for o, p in zip(self.offsets, self.probs)
        }

    def symmetrized(self) -> dict:
        """s(j) = (p(j) + p(-j)) / 2 as a mapping offset tuple -> weight."""
        s = {}
        for o, p in zip(self.offsets, self.probs):
            t = tuple(int(c) for c in o)
            m = tuple(-c for c in t)
            s[t] = s.get(t, 0.0) + p / 2
            s[m] = s.get(m, 0.0) + p / 2
        return s

    def reversed(self) -> "JumpKernel":
        return JumpKernel(self.dim, -self.offsets, self.probs.copy())

    @property
    def is_totally_asymmetric_nn(self) -> bool:
        return (
            self.dim == 1 and self.offsets.shape[0] == 1 and int(self.offsets[0, 0]) == 1
        )


def validate_kernel(entries: Mapping, dim: int = 1) -> JumpKernel:
    if not entries:
        raise KernelError("kernel has no entries")
    merged = {}
    for off, p in entries.items():
        t = _offset_tuple(off, dim)
        p = float(p)
        if p < 0 or not math.isfinite(p):
            raise KernelError(f"p{t} = {p} is not a probability")
        merged[t] = merged.get(t, 0.0) + p
    if merged.get((0,) * dim, 0.0) > 0:
        raise ZeroOffsetMass("p(0) > 0; the zero offset is not a jump")
    merged.pop((0,) * dim, None)
    total = math.fsum(merged.values())
    if abs(total - 1.0) > 1e-12:
        raise NotNormalized(f"probabilities sum to {total!r}")
    support = sorted(t for t, p in merged.items() if p > 0)
    # the symmetrization is supported on +-support; same group
    if not _lattice_rank_one(support, dim):
        raise ReducibleSymmetrization(
            f"symmetrized support {support} does not generate Z^{dim}"
        )
    offsets = np.array(support, dtype=np.int64).reshape(-1, dim)
    probs = np.array([merged[t] for t in support])
    return JumpKernel(dim, offsets, probs)


def parse_kernel_text(text: str, dim: int = 1) -> JumpKernel:
    """Read ``offset probability`` lines (offsets comma-separated when dim > 1)."""
    entries = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise KernelError(f"line {lineno}: expected 'offset probability'")
        try:
            off = tuple(int(c) for c in parts[0].split(","))
            p = float(parts[1])
        except ValueError:
            raise KernelError(f"line {lineno}: cannot parse {line!r}") from None
        if off in entries:
            raise KernelError(f"line {lineno}: duplicate offset {parts[0]}")
        entries[off] = p
    return validate_kernel(entries, dim)


def format_kernel_text(kernel: JumpKernel) -> str:
    lines = []
    for o, p in zip(kernel.offsets, kernel.probs):
        lines.append(f"{','.join(str(int(c)) for c in o)} {float(p)!r}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- lattice


@dataclass(frozen=True)
class LatticeSpec:
    """The periodic torus (Z/LZ)^d."""

    dim: int
    side: int

    def __post_init__(self):
        if self.dim < 1 or self.side < 1:
            raise ValueError("dim and side must be positive")

    @property
    def shape(self) -> tuple:
        return (self.side,) * self.dim

    @property
    def n_sites(self) -> int:
        return self.side**self.dim

    @property
    def sides(self) -> np.ndarray:
        return np.full(self.dim, self.side, dtype=np.int64)

    @property
    def strides(self) -> np.ndarray:
        return np.array(
            [self.side ** (self.dim - 1 - a) for a in range(self.dim)], dtype=np.int64
        )

    def check_kernel(self, kernel: JumpKernel) -> None:
        """Reject tori on which a single jump can wrap onto another offset."""
        if kernel.dim != self.dim:
            raise ValueError("kernel and lattice dimensions differ")
        if self.side <= 2 * kernel.max_step:
            raise ValueError(
                f"side {self.side} too small for jumps of length {kernel.max_step}"
            )

    def flat(self, coords) -> int:
        c = np.mod(np.asarray(coords, dtype=np.int64).reshape(self.dim), self.side)
        return int(c @ self.strides)

    def coords(self, site: int) -> np.ndarray:
        return np.array(np.unravel_index(site, self.shape), dtype=np.int64)

    def centered_coords(self) -> np.ndarray:
        """Per flat site, coordinates shifted into [-L/2, L/2)."""
        c = np.array(np.unravel_index(np.arange(self.n_sites), self.shape)).T
        return np.where(c >= (self.side + 1) // 2, c - self.side, c).astype(np.int64)

    def neighbor_table(self, kernel: JumpKernel) -> np.ndarray:
        """nbr[i, m] = flat site reached from i by the m-th kernel offset."""
        c = np.array(np.unravel_index(np.arange(self.n_sites), self.shape)).T
        out = np.empty((self.n_sites, kernel.offsets.shape[0]), dtype=np.int64)
        for m, o in enumerate(kernel.offsets):
            out[:, m] = np.mod(c + o, self.side) @ self.strides
        return out

    def center_out_order(self) -> np.ndarray:
        """Sites sorted by (max-norm, centered coords) of their centered position.

        Drawing initial occupancies in this order makes the draws near the
        origin agree between tori of different sides.
        """
        cc = self.centered_coords()
        key = np.abs(cc).max(axis=1)
        return np.lexsort(tuple(cc[:, a] for a in range(self.dim - 1, -1, -1)) + (key,))


def minimum_side(kernel: JumpKernel, max_rate: float, T: float) -> int:
    """Heuristic torus side keeping wrap-around effects away up to time T."""
    return int(math.ceil(2 * kernel.range * math.sqrt(1 + max_rate * T)))


# ---------------------------------------------------------------- configurations


class Configuration:
    """Occupancy counts on a torus; optionally read in the tagged frame.

    In the tagged frame the tagged particle sits at the origin, so
    ``occupancy[0...0] >= 1`` is enforced.
    """

    __slots__ = ("occupancy", "total_particles", "reference_frame")

    def __init__(self, occupancy, reference_frame: bool = False):
        occ = np.array(occupancy, dtype=np.int64)
        if occ.ndim == 0:
            raise ValueError("occupancy must be at least 1-d")
        if np.any(occ < 0):
            raise ValueError("occupancies must be nonnegative")
        total = int(occ.sum(dtype=np.int64))
        if total >= 2**62:
            raise OverflowError("particle count overflows int64 accumulators")
        if reference_frame and occ[(0,) * occ.ndim] < 1:
            raise ValueError("tagged frame requires a particle at the origin")
        self.occupancy = occ
        self.total_particles = total
        self.reference_frame = reference_frame

    @property
    def dim(self) -> int:
        return self.occupancy.ndim

    @property
    def side(self) -> int:
        return self.occupancy.shape[0]

    def __getitem__(self, site):
        return int(self.occupancy[self._index(site)])

    def _index(self, site):
        if isinstance(site, (int, np.integer)):
            site = (int(site),)
        return tuple(int(c) % n for c, n in zip(site, self.occupancy.shape))

    def __eq__(self, other):
        return (
            isinstance(other, Configuration)
            and self.occupancy.shape == other.occupancy.shape
            and bool(np.array_equal(self.occupancy, other.occupancy))
        )

    def __repr__(self):
        return f"Configuration({self.occupancy.tolist()})"

    def as_tuple(self) -> tuple:
        return tuple(self.occupancy.ravel().tolist())


def _offset(j, dim):
    if isinstance(j, (int, np.integer)):
        j = (int(j),)
    j = tuple(int(c) for c in j)
    if len(j) != dim:
        raise ValueError(f"offset {j} does not match dimension {dim}")
    return j


def move_particle(eta: Configuration, i, j) -> Configuration:
    """eta^{i,i+j}: one particle from ``i`` to ``i + j`` (periodic)."""
    src = eta._index(i)
    if eta.occupancy[src] < 1:
        raise EmptySource(f"no particle at site {src}")
    j = _offset(j, eta.dim)
    dst = eta._index(tuple(a + b for a, b in zip(src, j)))
    occ = eta.occupancy.copy()
    occ[src] -= 1
    occ[dst] += 1
    out = Configuration.__new__(Configuration)
    out.occupancy = occ
    out.total_particles = eta.total_particles
    out.reference_frame = False
    return out


def shift_frame(eta: Configuration, j) -> Configuration:
    """tau_j: (tau_j eta)_k = eta_{k + j}."""
    j = _offset(j, eta.dim)
    occ = np.roll(eta.occupancy, tuple(-c for c in j), axis=tuple(range(eta.dim)))
    out = Configuration.__new__(Configuration)
    out.occupancy = occ
    out.total_particles = eta.total_particles
    out.reference_frame = bool(occ[(0,) * eta.dim] >= 1) and eta.reference_frame
    return out


def tagged_jump(eta: Configuration, j) -> Configuration:
    """tau_j(eta^{0,j}): the tagged particle jumps by j, frame follows it."""
    out = shift_frame(move_particle(eta, (0,) * eta.dim, j), j)
    out.reference_frame = True
    return out
