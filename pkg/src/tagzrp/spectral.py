"""Exact linear algebra on small zero-range state spaces.

* ``CanonicalSpace`` enumerates occupancy vectors with a fixed particle
  number and ranks them in lexicographic order without a lookup table.
* ``build_generator`` assembles the symmetric process on a closed cube.
* ``reference_generator`` assembles the environment seen from a tagged
  particle on a small torus with a fixed particle number.

Inner products are weighted by the stationary law ``pi``; the adjoint of
``Q`` is ``D^-1 Q^T D`` with ``D = diag(pi)``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Optional

import numba
import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import (
    ConvergenceFailure,
    DegenerateSpace,
    SolveFailure,
    StateSpaceTooLarge,
)
from .model import JumpKernel, RateFunction

DEFAULT_CAP = 200_000
DENSE_LIMIT = 2000


# ---------------------------------------------------------------- state spaces


def n_compositions(M: int, parts: int) -> int:
    if parts == 0:
        return 1 if M == 0 else 0
    return math.comb(M + parts - 1, parts - 1)


class CanonicalSpace:
    """All occupancy vectors of ``n_sites`` sites holding ``M`` particles.

    States are listed in lexicographic order; ``rank`` maps vectors back to
    row numbers by counting the compositions that precede them.
    """

    def __init__(self, n_sites: int, M: int, cap: int = DEFAULT_CAP,
                 min_origin: int = 0):
        if n_sites < 1 or M < 0:
            raise ValueError("need n_sites >= 1 and M >= 0")
        self.n_sites = n_sites
        self.M = M
        self.min_origin = min_origin
        size = n_compositions(M - min_origin, n_sites) if M >= min_origin else 0
        if size > cap:
            raise StateSpaceTooLarge(f"{size} states exceed the cap {cap}")
        # cnt[p, m] = number of compositions of m into p parts
        cnt = np.zeros((n_sites + 1, M + 2), dtype=np.int64)
        cnt[0, 0] = 1
        for p in range(1, n_sites + 1):
            cnt[p] = np.cumsum(cnt[p - 1])
        self._prefix = np.concatenate(
            [np.zeros((n_sites + 1, 1), dtype=np.int64), np.cumsum(cnt, axis=1)], axis=1)
        self.states = self._enumerate()
        if self.states.shape[0] != size:
            raise AssertionError("enumeration size mismatch")

    def _enumerate(self):
        n, M = self.n_sites, self.M
        rows = []
        for bars in itertools.combinations(range(M + n - 1), n - 1):
            prev = -1
            row = []
            for b in bars:
                row.append(b - prev - 1)
                prev = b
            row.append(M + n - 2 - prev)
            if row[0] >= self.min_origin:
                rows.append(row)
        arr = np.array(rows, dtype=np.int64).reshape(-1, n)
        # combinations come out with the first part decreasing; flip to lex order
        return arr[np.lexsort(arr.T[::-1])]

    def __len__(self):
        return self.states.shape[0]

    def _full_rank(self, states):
        s = np.atleast_2d(states)
        n = self.n_sites
        r = np.full(s.shape[0], self.M, dtype=np.int64)
        out = np.zeros(s.shape[0], dtype=np.int64)
        P = self._prefix
        for i in range(n - 1):
            e = s[:, i]
            p = n - i - 1
            # compositions with a smaller entry e' < e at position i
            out += P[p, r + 1] - P[p, r - e + 1]
            r = r - e
        return out

    def rank(self, states) -> np.ndarray:
        """Row numbers of the given occupancy vectors."""
        full = self._full_rank(states)
        if self.min_origin == 0:
            return full
        # states with origin < min_origin come first in lex order
        skip = sum(n_compositions(self.M - v, self.n_sites - 1)
                   for v in range(self.min_origin))
        return full - skip

    def index(self, state) -> int:
        return int(self.rank(np.asarray(state, dtype=np.int64)[None])[0])


def _log_gfact(rate: RateFunction, M: int):
    g = rate.table(max(M, 1))
    out = np.zeros(M + 1)
    out[1:] = np.cumsum(np.log(g[1 : M + 1]))
    return out


@dataclass(frozen=True, eq=False)
class GeneratorMatrix:
    Q: sp.csr_matrix
    pi: np.ndarray
    space: CanonicalSpace
    reversibility_residual: float

    @property
    def n_states(self) -> int:
        return self.Q.shape[0]

    def adjoint(self) -> sp.csr_matrix:
        d = self.pi
        return (sp.diags(1.0 / d) @ self.Q.T @ sp.diags(d)).tocsr()

    def symmetric_part(self) -> sp.csr_matrix:
        return ((self.Q + self.adjoint()) * 0.5).tocsr()

    def antisymmetric_part(self) -> sp.csr_matrix:
        return ((self.Q - self.adjoint()) * 0.5).tocsr()

    def inner(self, f, h) -> float:
        return float(np.sum(self.pi * np.asarray(f) * np.asarray(h)))

    def center(self, f) -> np.ndarray:
        f = np.asarray(f, dtype=float)
        return f - self.inner(f, np.ones_like(f))


def reversibility_residual(Q, pi) -> float:
    """max |pi_x Q_xy - pi_y Q_yx| relative to max |pi_x Q_xy| (off-diagonal)."""
    F = sp.diags(pi) @ Q
    F = F - sp.diags(F.diagonal())
    R = abs(F - F.T)
    scale = abs(F).max()
    return float(R.max() / scale) if scale > 0 else 0.0


def _assemble(space, moves, rate_of):
    rows, cols, vals = [], [], []
    S = space.states
    for src_site, build_target, weight in moves:
        occ = S[:, src_site]
        ok = occ >= 1
        if not np.any(ok):
            continue
        idx = np.flatnonzero(ok)
        tgt = build_target(S[idx])
        r = rate_of(S[idx], src_site) * weight
        keep = r > 0
        rows.append(idx[keep])
        cols.append(space.rank(tgt[keep]))
        vals.append(r[keep])
    n = len(space)
    if rows:
        rows = np.concatenate(rows)
        cols = np.concatenate(cols)
        vals = np.concatenate(vals)
    else:
        rows = cols = np.zeros(0, dtype=np.int64)
        vals = np.zeros(0)
    Q = sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
    Q = Q - sp.diags(np.asarray(Q.sum(axis=1)).ravel())
    return Q.tocsr()


def _cube_sites(side: int, dim: int):
    return np.array(list(itertools.product(range(side), repeat=dim)), dtype=np.int64)


def build_generator(g: RateFunction, s, n_sites: int, M: int, dim: int = 1,
                    cap: int = DEFAULT_CAP) -> GeneratorMatrix:
    """Symmetric zero-range generator on the closed cube {0..n_sites-1}^dim.

    ``s`` maps offsets to symmetric weights (for example
    ``JumpKernel.symmetrized()``); moves leaving the cube are dropped.
    """
    if isinstance(s, JumpKernel):
        s = s.symmetrized()
    s = {((k,) if isinstance(k, (int, np.integer)) else tuple(k)): float(v)
         for k, v in s.items()}
    sites = _cube_sites(n_sites, dim)
    space = CanonicalSpace(len(sites), M, cap)
    if len(space) < 2:
        raise DegenerateSpace(f"{len(space)} state(s): no spectral gap")
    pos = {tuple(c): i for i, c in enumerate(sites)}
    gt = g.table(M)
    moves = []
    for i, c in enumerate(sites):
        for off, w in s.items():
            if w <= 0:
                continue
            tgt = tuple(int(a + b) for a, b in zip(c, off))
            if tgt not in pos:
                continue
            j = pos[tgt]

            def build(states, i=i, j=j):
                out = states.copy()
                out[:, i] -= 1
                out[:, j] += 1
                return out

            moves.append((i, build, w))
    Q = _assemble(space, moves, lambda st, i: gt[st[:, i]])
    lw = -_log_gfact(g, M)[space.states].sum(axis=1)
    pi = np.exp(lw - lw.max())
    pi /= pi.sum()
    res = reversibility_residual(Q, pi)
    return GeneratorMatrix(Q, pi, space, res)


def spectral_gap(G: GeneratorMatrix, rtol: float = 1e-8):
    """(gap, W = 1/gap) of a reversible generator."""
    n = G.n_states
    if n < 2:
        raise DegenerateSpace("no spectral gap on a single state")
    r = np.sqrt(G.pi)
    S = sp.diags(r) @ G.Q @ sp.diags(1.0 / r)
    S = ((S + S.T) * 0.5).tocsc()
    if n <= DENSE_LIMIT:
        ev = sla.eigvalsh(-S.toarray())
        gap = float(ev[1])
    else:
        # Lanczos for the bottom of -S with the known null vector sqrt(pi)
        # pushed to the top of the spectrum; no factorization needed
        v0 = r / np.linalg.norm(r)
        radius = 2.0 * float(abs(S.diagonal()).max())
        negS = (-S).tocsr()

        def mv(x):
            x = np.ravel(x)
            return negS @ x + radius * v0 * (v0 @ x)

        op = spla.LinearOperator((n, n), matvec=mv, dtype=float)
        try:
            ev = spla.eigsh(op, k=2, which="SA", tol=rtol * 1e-3,
                            return_eigenvectors=False, maxiter=100_000,
                            ncv=min(n, 64))
        except spla.ArpackNoConvergence as exc:
            raise ConvergenceFailure(str(exc)) from exc
        gap = float(np.min(ev))
    if not gap > 0:
        raise ConvergenceFailure(f"nonpositive gap {gap}")
    return gap, 1.0 / gap


def one_particle_gap(s, n_sites: int, dim: int = 1, rate: float = 1.0) -> float:
    """Gap of one walker jumping with rates rate * s(j) on the closed cube."""
    if isinstance(s, JumpKernel):
        s = s.symmetrized()
    s = {((k,) if isinstance(k, (int, np.integer)) else tuple(k)): float(v)
         for k, v in s.items()}
    sites = _cube_sites(n_sites, dim)
    pos = {tuple(c): i for i, c in enumerate(sites)}
    n = len(sites)
    A = np.zeros((n, n))
    for i, c in enumerate(sites):
        for off, w in s.items():
            j = pos.get(tuple(int(a + b) for a, b in zip(c, off)))
            if j is not None and w > 0:
                A[i, j] += rate * w
    A -= np.diag(A.sum(axis=1))
    ev = sla.eigvalsh(-(A + A.T) / 2)
    return float(ev[1])


# ---------------------------------------------------------------- resolvents


def _solve(A, b):
    try:
        if sp.issparse(A):
            u = spla.spsolve(A.tocsc(), b)
        else:
            u = sla.solve(A, b)
    except (RuntimeError, sla.LinAlgError) as exc:
        raise SolveFailure(str(exc)) from exc
    if not np.all(np.isfinite(u)):
        raise SolveFailure("non-finite solution")
    resid = np.abs(A @ u - b).max()
    if resid > 1e-8 * max(1.0, np.abs(b).max()):
        raise SolveFailure(f"residual {resid:.3g}")
    return u


def resolvent_form(f, Q, lam: float, pi) -> float:
    """<f, (lam - Q)^-1 f>_pi for any generator Q."""
    if not lam > 0:
        raise ValueError("lambda must be positive")
    n = Q.shape[0]
    u = _solve(lam * sp.identity(n, format="csr") - Q, np.asarray(f, dtype=float))
    return float(np.sum(pi * f * u))


def dirichlet_form(h, S, pi) -> float:
    return float(np.sum(pi * h * -(S @ h)))


@dataclass(frozen=True)
class ResolventNorm:
    value: float
    probe_sup: float
    at_solution: float
    solution: np.ndarray


def resolvent_norm(f, G: GeneratorMatrix, lam: float, probes: int = 32, rng=None,
                   tol: float = 1e-8) -> ResolventNorm:
    """||f||^2_{-1,lam} = <f, (lam - S)^-1 f>_pi with its variational check.

    The variational face sup_h 2<f,h> - lam<h,h> - <h,-S h> is probed on
    ``probes`` random directions (each optimally scaled) and at the solution
    itself; the probes must stay below the solve and the solution must
    attain it.
    """
    S = G.symmetric_part()
    pi = G.pi
    f = G.center(f)
    n = S.shape[0]
    u = _solve(lam * sp.identity(n, format="csr") - S, f)
    val = float(np.sum(pi * f * u))

    def face(h):
        num = float(np.sum(pi * f * h))
        den = lam * float(np.sum(pi * h * h)) + dirichlet_form(h, S, pi)
        return num * num / den if den > 0 else 0.0

    rng = np.random.default_rng(0) if rng is None else rng
    sup = max((face(rng.standard_normal(n)) for _ in range(probes)), default=0.0)
    at = face(u)
    scale = max(abs(val), 1e-300)
    if sup > val * (1 + tol) + 1e-14 or abs(at - val) > tol * scale:
        raise SolveFailure(
            f"variational check failed: solve {val}, probes {sup}, at solution {at}")
    return ResolventNorm(val, sup, at, u)


def h_minus_one(f, G: GeneratorMatrix) -> float:
    """||f||^2_{-1} = <f, (-S)^+ f>_pi for centered f on an irreducible space."""
    S = G.symmetric_part()
    f = G.center(f)
    r = np.sqrt(G.pi)
    Ssym = (sp.diags(r) @ S @ sp.diags(1.0 / r)).toarray()
    Ssym = (Ssym + Ssym.T) / 2
    w, V = sla.eigh(-Ssym)
    ft = r * f
    c = V.T @ ft
    keep = w > 1e-12 * max(1.0, abs(w).max())
    return float(np.sum(c[keep] ** 2 / w[keep]))


# ---------------------------------------------------------------- reference toy


def reference_generator(g: RateFunction, kernel: JumpKernel, side: int, N: int,
                        cap: int = 10_000, check_tol: float = 1e-10) -> GeneratorMatrix:
    """Generator of the environment seen from the tagged particle, 1-d torus.

    States are occupancies eta with eta_0 >= 1 and N particles in total.
    The stationary law is the canonical palm weight
    eta_0 * prod_i 1/(g(1)...g(eta_i)); it is checked against the numeric
    null vector of Q^T.
    """
    if kernel.dim != 1:
        raise ValueError("reference toy is one-dimensional")
    if side <= 2 * kernel.max_step:
        raise ValueError("torus too small for the kernel")
    space = CanonicalSpace(side, N, cap, min_origin=1)
    if len(space) < 2:
        raise DegenerateSpace("reference toy has a single state")
    gt = g.table(N)
    ht = g.per_particle_table(N)
    moves = []
    for j, p in zip(kernel.offsets[:, 0], kernel.probs):
        j = int(j)
        for i in range(side):
            t = (i + j) % side
            if i == 0:
                def other(states, t=t):
                    out = states.copy()
                    out[:, 0] -= 1
                    out[:, t] += 1
                    return out

                def tagged(states, t=t, j=j):
                    out = states.copy()
                    out[:, 0] -= 1
                    out[:, t] += 1
                    return np.roll(out, -j, axis=1)

                moves.append((0, other, p, "other"))
                moves.append((0, tagged, p, "tagged"))
            else:
                def move(states, i=i, t=t):
                    out = states.copy()
                    out[:, i] -= 1
                    out[:, t] += 1
                    return out

                moves.append((i, move, p, "site"))

    def rate_of(kind):
        def fn(states, i):
            k = states[:, i]
            if kind == "site":
                return gt[k]
            if kind == "tagged":
                return ht[k]
            return gt[k] - ht[k]
        return fn

    parts = []
    for i, build, w, kind in moves:
        parts.append(_assemble(space, [(i, build, w)], rate_of(kind)))
    Q = sum(parts[1:], parts[0]).tocsr()
    lw = -_log_gfact(g, N)[space.states].sum(axis=1) + np.log(space.states[:, 0])
    pi = np.exp(lw - lw.max())
    pi /= pi.sum()
    # numeric stationary law
    resid = np.abs(Q.T @ pi).max() / max(abs(Q).max(), 1.0)
    if resid > check_tol:
        raise AssertionError(f"palm weights are not stationary (residual {resid:.3g})")
    return GeneratorMatrix(Q, pi, space, reversibility_residual(Q, pi))


def numeric_stationary(Q) -> np.ndarray:
    """Null vector of Q^T normalized to a probability vector."""
    A = Q.T.toarray() if sp.issparse(Q) else np.asarray(Q).T
    n = A.shape[0]
    B = np.vstack([A, np.ones((1, n))])
    rhs = np.zeros(n + 1)
    rhs[-1] = 1.0
    pi, *_ = np.linalg.lstsq(B, rhs, rcond=None)
    return pi


def h_observable(G: GeneratorMatrix, g: RateFunction) -> np.ndarray:
    """g(eta_0)/eta_0 centred under the toy's stationary law."""
    k0 = G.space.states[:, 0]
    h = g.per_particle_table(int(k0.max()))[k0]
    return G.center(h)


def sigma_t_exact(f, G: GeneratorMatrix, t: float, reversible: Optional[bool] = None) -> float:
    """E_pi[(int_0^t f(eta_s) ds)^2] = 2 int_0^t (t-s) <f, e^{sQ} f>_pi ds."""
    f = np.asarray(f, dtype=float)
    if t <= 0 or not np.any(f):
        return 0.0
    if reversible is None:
        reversible = G.reversibility_residual < 1e-12
    pi = G.pi
    n = G.n_states
    if reversible:
        r = np.sqrt(pi)
        S = (sp.diags(r) @ G.Q @ sp.diags(1.0 / r)).toarray()
        S = (S + S.T) / 2
        w, V = sla.eigh(-S)
        c = V.T @ (r * f)
        w = np.maximum(w, 0.0)
        small = w * t < 1e-8
        phi = np.where(small, t * t / 2,
                       (w * t - 1 + np.exp(-w * t)) / np.where(small, 1.0, w * w))
        return float(2 * np.sum(c * c * phi))
    # Van Loan: top-right block of exp(t [[Q, I, 0], [0, 0, I], [0, 0, 0]])
    Qd = G.Q.toarray() if n <= DENSE_LIMIT else G.Q
    if n <= DENSE_LIMIT:
        B = np.zeros((3 * n, 3 * n))
        B[:n, :n] = Qd
        B[:n, n : 2 * n] = np.eye(n)
        B[n : 2 * n, 2 * n :] = np.eye(n)
        E = sla.expm(t * B)
        u = E[:n, 2 * n :] @ f
    else:
        I = sp.identity(n, format="csr")
        Z = sp.csr_matrix((n, n))
        B = sp.bmat([[G.Q, I, Z], [Z, Z, I], [Z, Z, Z]], format="csr")
        v = np.concatenate([np.zeros(2 * n), f])
        u = spla.expm_multiply(t * B, v)[:n]
    return float(2 * np.sum(pi * f * u))


@dataclass(frozen=True)
class UB1Row:
    t: float
    sigma2: float
    full: float  # <f, (1/t - Q)^-1 f>
    symmetric: float  # <f, (1/t - S)^-1 f>
    h_minus_one: float
    ratio: float  # sigma2 / (t * full)
    ordered: bool


def ub1_check(f, G: GeneratorMatrix, t_list, tol: float = 1e-10):
    """Ratios sigma_t^2 / (t <f,(1/t - Q)^-1 f>) and the resolvent ordering."""
    f = G.center(f)
    S = G.symmetric_part()
    hm1 = h_minus_one(f, G)
    rows = []
    for t in t_list:
        lam = 1.0 / t
        s2 = sigma_t_exact(f, G, t, reversible=False)
        full = resolvent_form(f, G.Q, lam, G.pi)
        sym = resolvent_form(f, S, lam, G.pi)
        ratio = s2 / (t * full) if full > 0 else math.nan
        scale = max(abs(sym), 1e-300)
        ordered = full <= sym + tol * scale and sym <= hm1 + tol * max(abs(hm1), 1e-300)
        rows.append(UB1Row(float(t), s2, full, sym, hm1, ratio, bool(ordered)))
    return rows


def is_monotone(values) -> str:
    v = np.asarray(values, dtype=float)
    if np.all(np.diff(v) >= 0):
        return "nondecreasing"
    if np.all(np.diff(v) <= 0):
        return "nonincreasing"
    return "not monotone"


# ---------------------------------------------------------------- scans


def bulk_count_law(params, n_sites: int, tol: float = 1e-15) -> np.ndarray:
    """Exact law of the particle count on ``n_sites`` independent bulk sites."""
    pmf = np.array([1.0])
    mu = params.bulk_pmf
    for _ in range(n_sites):
        pmf = np.convolve(pmf, mu)
    cut = np.flatnonzero(pmf > tol)
    return pmf[: cut[-1] + 1] if cut.size else pmf


@dataclass(frozen=True)
class SPRow:
    n: int
    n_sites: int
    ratio: float  # E[W^2] / n^4 over the computed counts
    covered_mass: float
    truncated_mass: float
    max_M: int


def sp_assumption_scan(g: RateFunction, params, n_list, kernel: JumpKernel = None,
                       cap: int = DEFAULT_CAP, mass_tol: float = 1e-12):
    """E_R[W(n, N_n)^2] / n^4 on cubes B_n = {|i| <= n} (1-d, 2n+1 sites).

    The count law is the exact convolution of the bulk marginal; counts whose
    state space exceeds ``cap`` are skipped and their mass is reported.
    W(n, 0) is 0 (a single state has no fluctuations).
    """
    s = kernel.symmetrized() if kernel is not None else {(1,): 0.5, (-1,): 0.5}
    rows = []
    for n in n_list:
        n_sites = 2 * n + 1
        law = bulk_count_law(params, n_sites)
        acc = 0.0
        covered = float(law[0])
        trunc = 0.0
        max_M = 0
        for M in range(1, law.size):
            pM = float(law[M])
            if pM < mass_tol:
                trunc += pM
                continue
            if n_compositions(M, n_sites) > cap:
                trunc += float(law[M:].sum())
                break
            gap, W = spectral_gap(build_generator(g, s, n_sites, M, cap=cap))
            acc += pM * W * W
            covered += pM
            max_M = M
        rows.append(SPRow(int(n), n_sites, acc / n**4, covered, trunc, max_M))
    return rows


def sp_gate(rows, factor: float = 1.5) -> bool:
    """ratio(n_max) <= factor * ratio(n_min)."""
    if len(rows) < 2:
        return True
    return rows[-1].ratio <= factor * rows[0].ratio


@dataclass(frozen=True)
class MorrisFit:
    slope: float
    intercept: float
    points: list  # (n, M, W, (1 + M/n)^2 n^2)


def morris_fit(g: RateFunction, n_values=(3, 4, 5, 6), factors=(1, 2, 4),
               s=None, cap: int = DEFAULT_CAP) -> MorrisFit:
    """Least-squares slope of log W(n, M) against log((1 + M/n)^2 n^2)."""
    s = s or {(1,): 0.5, (-1,): 0.5}
    pts = []
    for n in n_values:
        for f in factors:
            M = f * n
            _, W = spectral_gap(build_generator(g, s, n, M, cap=cap))
            pts.append((n, M, W, (1 + M / n) ** 2 * n**2))
    X = np.log([p[3] for p in pts])
    Y = np.log([p[2] for p in pts])
    slope, intercept = np.polyfit(X, Y, 1)
    return MorrisFit(float(slope), float(intercept), pts)


# ---------------------------------------------------------------- toy Monte Carlo


@numba.njit(cache=True)
def _additive_paths(indptr, indices, cum, exit_rate, pi_cdf, f, t, n, seed):
    np.random.seed(seed)
    out = np.empty(n)
    for r in range(n):
        s = np.searchsorted(pi_cdf, np.random.random(), side="right")
        if s >= pi_cdf.size:
            s = pi_cdf.size - 1
        clock = 0.0
        acc = 0.0
        while True:
            q = exit_rate[s]
            dt = np.random.exponential(1.0) / q if q > 0 else np.inf
            if clock + dt >= t:
                acc += (t - clock) * f[s]
                break
            acc += dt * f[s]
            clock += dt
            a, b = indptr[s], indptr[s + 1]
            u = np.random.random() * cum[b - 1]
            k = a
            while k < b - 1 and cum[k] <= u:
                k += 1
            s = indices[k]
        out[r] = acc
    return out


def additive_samples(f, G: GeneratorMatrix, t: float, n: int, seed: int) -> np.ndarray:
    """Samples of int_0^t f(eta_s) ds for the chain started from pi."""
    Q = sp.csr_matrix(G.Q)
    off = (Q - sp.diags(Q.diagonal())).tocsr()
    off.eliminate_zeros()
    off.sort_indices()
    rates = off.data.astype(float)
    cum = np.empty_like(rates)
    for s in range(off.shape[0]):
        a, b = off.indptr[s], off.indptr[s + 1]
        cum[a:b] = np.cumsum(rates[a:b])
    exit_rate = np.asarray(off.sum(axis=1)).ravel()
    pi_cdf = np.cumsum(G.pi)
    pi_cdf[-1] = 1.0
    return _additive_paths(off.indptr.astype(np.int64), off.indices.astype(np.int64), cum,
                           exit_rate, pi_cdf, np.asarray(f, dtype=float), float(t), int(n),
                           int(seed) % (2**32))


def sigma_t_monte_carlo(f, G: GeneratorMatrix, t: float, n: int, seed: int):
    """(estimate, SE) of E_pi[(int_0^t f)^2]."""
    x = additive_samples(f, G, t, n, seed)
    sq = x * x
    return float(sq.mean()), float(sq.std(ddof=1) / math.sqrt(n))
