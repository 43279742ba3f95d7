"""Command-line front end: ``tagzrp <subcommand> --config run.cfg``.

Exit codes: 0 when every gate passes, 1 on a gate failure or a runtime
violation, 2 on configuration or precondition errors.
"""

from __future__ import annotations

import argparse
import math
import os
import sys

import numpy as np
from scipy import stats as sps

from . import coupling, estimators as est, spectral
from .config import RunConfig
from .equilibrium import ENSEMBLES, equilibrium, sample_configuration
from .errors import ConfigError, InsufficientSamples, ZRPError
from .model import LatticeSpec, minimum_side, parse_kernel_text, validate_rate
from .simulator import ENGINES, Model, run_ensemble

SUBCOMMANDS = ("validate", "sample", "simulate", "variance", "clt", "coupling-check",
               "association", "identities", "spectral-gap", "sp-scan", "ub1")

EXIT_OK, EXIT_GATE, EXIT_CONFIG = 0, 1, 2

M, X, O = "model", "experiment", "output"


# ---------------------------------------------------------------- model block


def build_rate(cfg: RunConfig):
    text = cfg.get_str(M, "rate")
    try:
        return validate_rate(text, cfg.get_int(M, "probe-max", 64))
    except (ZRPError, ValueError) as exc:
        raise cfg.error(M, "rate", str(exc)) from None


def build_kernel(cfg: RunConfig):
    dim = cfg.get_int(M, "dim", 1)
    if dim < 1:
        raise cfg.error(M, "dim", "must be at least 1")
    if cfg.has(M, "kernel-file"):
        name = cfg.get_str(M, "kernel-file")
        path = name if os.path.isabs(name) else os.path.join(
            os.path.dirname(os.path.abspath(cfg.path)), name)
        try:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise cfg.error(M, "kernel-file", exc.strerror) from None
        key = "kernel-file"
    else:
        text = cfg.get_str(M, "kernel").replace(";", "\n")
        key = "kernel"
    try:
        return parse_kernel_text(text, dim)
    except (ZRPError, ValueError) as exc:
        raise cfg.error(M, key, str(exc)) from None


def build_params(cfg: RunConfig, rate):
    has_a, has_r = cfg.has(M, "alpha"), cfg.has(M, "rho")
    if has_a == has_r:
        raise ConfigError("give exactly one of 'alpha' and 'rho' in section [model]", cfg.path)
    key = "alpha" if has_a else "rho"
    val = cfg.get_float(M, key)
    try:
        return equilibrium(rate, **{key: val}, tail_tol=cfg.get_float(M, "tail-tol", 1e-12))
    except (ZRPError, ValueError) as exc:
        raise cfg.error(M, key, str(exc)) from None


def default_side(kernel, params, T: float) -> int:
    gmax = float(np.max(params.rate.table(params.K_max)))
    return max(minimum_side(kernel, gmax, T), 2 * kernel.max_step + 1)


def build_model(cfg: RunConfig, T: float = 0.0) -> Model:
    rate = build_rate(cfg)
    kernel = build_kernel(cfg)
    params = build_params(cfg, rate)
    side = cfg.get_int(M, "side") if cfg.has(M, "side") else default_side(kernel, params, T)
    lat = LatticeSpec(kernel.dim, side)
    try:
        lat.check_kernel(kernel)
    except (ZRPError, ValueError) as exc:
        raise cfg.error(M, "side", str(exc)) from None
    ens = cfg.get_str(M, "ensemble", "Q")
    if ens not in ENSEMBLES:
        raise cfg.error(M, "ensemble", f"must be one of {sorted(ENSEMBLES)}")
    return Model(rate, kernel, lat, params, cfg.get_bool(M, "f-literal", False),
                 cfg.get_float(X, "max-events", 1e9))


# ---------------------------------------------------------------- experiment block


def horizon(cfg: RunConfig):
    T = cfg.get_float(X, "T")
    if not T > 0:
        raise cfg.error(X, "T", "must be positive")
    ck = cfg.get_floats(X, "checkpoints", [T])
    if any(b <= a for a, b in zip(ck, ck[1:])):
        raise cfg.error(X, "checkpoints", "must be strictly increasing")
    if ck and (ck[0] < 0 or ck[-1] > T):
        raise cfg.error(X, "checkpoints", "must lie in [0, T]")
    return T, ck


def replicas(cfg: RunConfig, default=None) -> int:
    n = cfg.get_int(X, "replicas") if default is None else cfg.get_int(X, "replicas", default)
    if n < 1:
        raise cfg.error(X, "replicas", "must be at least 1")
    return n


def seed(cfg: RunConfig) -> int:
    s = cfg.get_int(X, "seed", 0)
    if s < 0:
        raise cfg.error(X, "seed", "must be nonnegative")
    return s


def engine(cfg: RunConfig) -> str:
    e = cfg.get_str(X, "engine", "direct")
    if e not in ENGINES:
        raise cfg.error(X, "engine", f"must be one of {list(ENGINES)}")
    return e


def probes(cfg: RunConfig, dim: int):
    vals = cfg.get_ints(X, "probes", [])
    if dim != 1 and vals:
        raise cfg.error(X, "probes", "probe offsets are supported for d = 1 only")
    return [(v,) for v in vals] or None


def simulate_run(cfg: RunConfig, model: Model, T, ck, ensemble=None):
    return run_ensemble(model, T, ck, replicas(cfg), seed(cfg),
                        ensemble=ensemble or cfg.get_str(M, "ensemble", "Q"),
                        probes=probes(cfg, model.lattice.dim), engine=engine(cfg))


def maybe_dump(cfg: RunConfig, args, run) -> None:
    path = args.dump or (cfg.get_str(O, "dump") if cfg.has(O, "dump") else None)
    if path:
        run.dump_jsonl(path)


# ---------------------------------------------------------------- subcommands


def cmd_validate(cfg, args):
    rate = build_rate(cfg)
    kernel = build_kernel(cfg)
    params = build_params(cfg, rate)
    info = [
        ("rate", rate.text), ("lipschitz-bound", rate.lipschitz_bound),
        ("liminf-estimate", rate.liminf_estimate), ("is-id", rate.is_id),
        ("gap-class", rate.gap_class), ("kernel-range", kernel.range),
        ("drift", ",".join(est.fmt_float(v) for v in kernel.drift)),
        ("alpha", params.alpha), ("rho", params.rho), ("Z", params.Z),
        ("K-max", params.K_max), ("speed", params.speed),
    ]
    def text(v):
        if isinstance(v, bool):
            return str(v).lower()
        return est.fmt_float(v) if isinstance(v, float) else str(v)

    rows = [(k, text(v)) for k, v in info]
    return ("property", "value"), rows, True


def cmd_sample(cfg, args):
    model = build_model(cfg)
    n = replicas(cfg)
    ens = cfg.get_str(M, "ensemble", "Q")
    rng = np.random.default_rng(np.random.SeedSequence(seed(cfg)))
    eta = sample_configuration(ens, model.lattice, model.params, rng, size=n)
    level = cfg.get_float(X, "level", 0.01)
    first = model.lattice.flat((0,) * model.lattice.dim)
    rows = []
    stat, _, p = est.chi_square_gof(eta[:, first], model.params.pmf(ENSEMBLES[ens]))
    rows.append(est.ReportRow("origin-gof", 0.0, stat, math.nan, level, est.verdict(p > level)))
    rows.append(est.ReportRow("origin-gof-pvalue", 0.0, p, math.nan, level, "info"))
    for (k,) in probes(cfg, model.lattice.dim) or []:
        site = model.lattice.flat((k,))
        stat, _, p = est.chi_square_gof(eta[:, site], model.params.bulk_pmf)
        rows.append(est.ReportRow(f"site-gof[{k}]", 0.0, stat, math.nan, level,
                                  est.verdict(p > level)))
        rows.append(est.ReportRow(f"site-gof-pvalue[{k}]", 0.0, p, math.nan, level, "info"))
    return est.REPORT_COLUMNS, rows, est.all_pass(rows)


def _poisson_rows(x, t, lam, sigma, level):
    n = x.size
    m = float(x.mean())
    se_m = float(x.std(ddof=1) / math.sqrt(n))
    v = float(x.var(ddof=1))
    c = x - m
    se_v = float(np.sqrt(np.var(c * c, ddof=1) / n))
    d, p = est.discrete_ks(x, lambda k: sps.poisson.cdf(k, lam))
    return [
        est.ReportRow("poisson-mean", t, m, se_m, lam, est.verdict(abs(m - lam) <= sigma * se_m)),
        est.ReportRow("poisson-var", t, v, se_v, lam, est.verdict(abs(v - lam) <= sigma * se_v)),
        est.ReportRow("poisson-ks", t, d, math.nan, level, est.verdict(p > level)),
        est.ReportRow("poisson-ks-pvalue", t, p, math.nan, level, "info"),
    ]


def cmd_simulate(cfg, args):
    T, ck = horizon(cfg)
    model = build_model(cfg, T)
    run = simulate_run(cfg, model, T, ck)
    maybe_dump(cfg, args, run)
    stats = est.EnsembleStats.from_run(run)
    sigma = cfg.get_float(X, "sigma", est.SIGMA)
    level = cfg.get_float(X, "level", 0.01)
    rows = []
    for c, t in enumerate(stats.times):
        for a in range(stats.dim):
            m, se = stats.estimate(stats.f_mean_x(c, a))
            target = float(stats.mean_velocity[a] * t)
            name = "mean-x" if stats.dim == 1 else f"mean-x[{a}]"
            rows.append(est.ReportRow(name, t, m, se, target, est.verdict(abs(m - target) <= sigma * se)))
        v, se = stats.estimate(stats.f_var_x(c))
        rows.append(est.ReportRow("var-x", t, v, se, stats.diffusive_floor * t, "info"))
    if stats.n >= 100:
        rows += est.martingale_check(stats, sigma)
    ref = cfg.get_str(X, "reference", "none")
    if ref == "poisson":
        if not (model.kernel.is_totally_asymmetric_nn and model.rate.per_particle_constant):
            raise cfg.error(X, "reference", "poisson needs p(1) = 1 and g(k)/k constant")
        t = float(run.times[-1])
        rows += _poisson_rows(run.x[:, -1, 0], t, model.speed * t, sigma, level)
    elif ref != "none":
        raise cfg.error(X, "reference", "must be 'none' or 'poisson'")
    for i, p in enumerate(run.probes):
        k = int(p[0])
        stat, _, pv = est.chi_square_gof(run.probe_values[:, -1, i], model.params.bulk_pmf)
        t = float(run.times[-1])
        rows.append(est.ReportRow(f"site-gof[{k}]", t, stat, math.nan, level, est.verdict(pv > level)))
        rows.append(est.ReportRow(f"site-gof-pvalue[{k}]", t, pv, math.nan, level, "info"))
    return est.REPORT_COLUMNS, rows, est.all_pass(rows)


def cmd_variance(cfg, args):
    T, ck = horizon(cfg)
    model = build_model(cfg, T)
    run = simulate_run(cfg, model, T, ck)
    maybe_dump(cfg, args, run)
    stats = est.EnsembleStats.from_run(run)
    sigma = cfg.get_float(X, "sigma", est.SIGMA)
    win = cfg.get_floats(X, "window", [10.0, 100.0])
    if len(win) != 2:
        raise cfg.error(X, "window", "expected two times")
    rows = est.drift_check(stats, model, sigma)
    rows += est.variance_bounds_check(stats, model, tuple(win),
                                      cfg.get_float(X, "ratio-gate", 2.0), sigma)
    if cfg.get_bool(X, "superadditivity", True):
        rows += est.superadditivity_scan(stats, sigma).rows
    return est.REPORT_COLUMNS, rows, est.all_pass(rows)


def cmd_clt(cfg, args):
    T, _ = horizon(cfg)
    model = build_model(cfg, T)
    require = cfg.get_bool(X, "require-id", True)
    min_time = cfg.get_float(X, "min-time", 50.0)
    est.clt_preconditions(model, T, require, min_time)
    n = replicas(cfg)
    min_n = cfg.get_int(X, "min-replicas", 10_000)
    if n < min_n:
        raise InsufficientSamples(f"CLT test needs at least {min_n} replicas")
    run = simulate_run(cfg, model, T, [T])
    maybe_dump(cfg, args, run)
    res = est.clt_test(run.x[:, -1, 0], T, model, require_id=require,
                       level=cfg.get_float(X, "level", 0.01),
                       ci_level=cfg.get_float(X, "ci-level", 0.99),
                       min_samples=min_n, min_time=min_time)
    return est.REPORT_COLUMNS, res.rows, res.passed


def cmd_coupling(cfg, args):
    T = cfg.get_float(X, "T")
    model = build_model(cfg, T)
    variant = cfg.get_str(X, "variant", "matched")
    if variant not in coupling.VARIANTS:
        raise cfg.error(X, "variant", f"must be one of {sorted(coupling.VARIANTS)}")
    origin = cfg.get_str(X, "origin", "extra")
    if origin not in ("extra", "primed", "same"):
        raise cfg.error(X, "origin", "must be extra, primed or same")
    res = coupling.run_coupled_ensemble(model, T, replicas(cfg), seed(cfg), origin=origin,
                                        variant=variant)
    rows = []
    for r in range(res.status.size):
        bad = int(res.status[r] != coupling.OK)
        rows.append((r, int(res.min_gap[r]), float(res.min_rate[r]), bad, int(res.events[r])))
    cols = ("replica", "min_gap", "min_rate", "violations", "events")
    return cols, rows, res.violations == 0


def cmd_association(cfg, args):
    t = cfg.get_float(X, "t")
    s = cfg.get_float(X, "s")
    if not (t > 0 and s > 0):
        raise ConfigError("'t' and 's' in section [experiment] must be positive", cfg.path)
    model = build_model(cfg, t + s)
    run = simulate_run(cfg, model, t + s, [t, t + s])
    maybe_dump(cfg, args, run)
    res = est.association_test(run.x[:, 0, 0], run.x[:, 1, 0],
                               sigma=cfg.get_float(X, "sigma", est.SIGMA), t=t,
                               min_replicas=cfg.get_int(X, "min-replicas", 10_000))
    rows = list(res.rows)
    rows.append(est.ReportRow("association-identity", t, res.identity_cov, math.nan,
                              res.identity_check, "info"))
    return est.REPORT_COLUMNS, rows, est.all_pass(rows)


def cmd_identities(cfg, args):
    rate = build_rate(cfg)
    kernel = build_kernel(cfg)
    params = build_params(cfg, rate)
    n = cfg.get_int(X, "samples")
    dim = kernel.dim
    k = tuple(cfg.get_ints(X, "k", [1] + [0] * (dim - 1)))
    j = tuple(cfg.get_ints(X, "j", [1] + [0] * (dim - 1)))
    rng = np.random.default_rng(np.random.SeedSequence(seed(cfg)))
    rows = est.adjoint_identity_check(params, n, rng, dim=dim, k=k, j=j,
                                      sigma=cfg.get_float(X, "sigma", est.SIGMA))
    return est.REPORT_COLUMNS, rows, est.all_pass(rows)


def cmd_spectral_gap(cfg, args):
    rate = build_rate(cfg)
    kernel = build_kernel(cfg)
    s = kernel.symmetrized()
    tol = cfg.get_float(X, "residual-tol", 1e-12)
    cap = cfg.get_int(X, "cap", spectral.DEFAULT_CAP)
    rows = []
    ok = True
    for n in cfg.get_ints(X, "n-list"):
        for m in cfg.get_ints(X, "M-list"):
            G = spectral.build_generator(rate, s, n, m, dim=kernel.dim, cap=cap)
            gap, W = spectral.spectral_gap(G)
            ok = ok and G.reversibility_residual < tol
            rows.append((n, m, G.n_states, gap, W, W * W / n**4, G.reversibility_residual))
    cols = ("n", "M", "states", "gap", "W", "W2_over_n4", "reversibility_residual")
    return cols, rows, ok


def cmd_sp_scan(cfg, args):
    rate = build_rate(cfg)
    kernel = build_kernel(cfg)
    params = build_params(cfg, rate)
    res = spectral.sp_assumption_scan(rate, params, cfg.get_ints(X, "n-list"), kernel,
                                      cap=cfg.get_int(X, "cap", spectral.DEFAULT_CAP))
    rows = [(r.n, r.n_sites, r.ratio, r.covered_mass, r.truncated_mass, r.max_M) for r in res]
    cols = ("n", "sites", "ratio", "covered_mass", "truncated_mass", "max_M")
    return cols, rows, spectral.sp_gate(res, cfg.get_float(X, "factor", 1.5))


def cmd_ub1(cfg, args):
    rate = build_rate(cfg)
    kernel = build_kernel(cfg)
    G = spectral.reference_generator(rate, kernel, cfg.get_int(X, "toy-side", 4),
                                     cfg.get_int(X, "toy-particles", 3))
    h = spectral.h_observable(G, rate)
    t_list = cfg.get_floats(X, "t-list", [1.0, 2.0, 5.0, 10.0])
    n_mc = cfg.get_int(X, "replicas", 0)
    sigma = cfg.get_float(X, "sigma", est.SIGMA)
    rows = []
    ok = True
    for i, r in enumerate(spectral.ub1_check(h, G, t_list)):
        mc, se = (math.nan, math.nan)
        agree = True
        if n_mc > 0:
            mc, se = spectral.sigma_t_monte_carlo(h, G, r.t, n_mc, seed(cfg) + i)
            agree = abs(mc - r.sigma2) <= sigma * se
        good = r.ordered and math.isfinite(r.ratio) and agree
        ok = ok and good
        rows.append((r.t, r.sigma2, mc, se, r.full, r.symmetric, r.h_minus_one, r.ratio,
                     str(r.ordered).lower(), est.verdict(good)))
    cols = ("t", "sigma2", "sigma2_mc", "se", "full", "symmetric", "h_minus_one", "ratio",
            "ordered", "verdict")
    return cols, rows, ok


COMMANDS = {
    "validate": cmd_validate, "sample": cmd_sample, "simulate": cmd_simulate,
    "variance": cmd_variance, "clt": cmd_clt, "coupling-check": cmd_coupling,
    "association": cmd_association, "identities": cmd_identities,
    "spectral-gap": cmd_spectral_gap, "sp-scan": cmd_sp_scan, "ub1": cmd_ub1,
}


# ---------------------------------------------------------------- driver


def _sort_key(row):
    if isinstance(row, est.ReportRow):
        t = row.t if math.isfinite(row.t) else math.inf
        return (row.test, t)
    return ()


def parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tagzrp", description="Tagged zero-range process experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        sp_ = sub.add_parser(name)
        sp_.add_argument("--config", "-c", required=True, help="run configuration file")
        sp_.add_argument("--out", "-o", help="CSV report path (default: [output] csv or stdout)")
        sp_.add_argument("--dump", help="JSONL trajectory dump path")
        sp_.add_argument("--seed", type=int, help="override [experiment] seed")
    return p


def run_cli(argv=None) -> int:
    try:
        args = parser().parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        cfg = RunConfig.load(args.config)
        if args.seed is not None:
            cfg.set(X, "seed", args.seed)
        cols, rows, ok = COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"tagzrp: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ZRPError as exc:
        print(f"tagzrp {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_CONFIG if isinstance(exc, ValueError) else EXIT_GATE
    except ValueError as exc:
        print(f"tagzrp {args.command}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if rows and isinstance(rows[0], est.ReportRow):
        rows = sorted(rows, key=_sort_key)
    out = args.out or (cfg.get_str(O, "csv") if cfg.has(O, "csv") else None)
    text = est.render_csv(rows, cols, cfg.canonical())
    if out:
        with open(out, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK if ok else EXIT_GATE


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
