"""Acceptance gate: one test per criterion, each recorded for the summary.

Every Monte Carlo criterion runs through the command line on a generated
config so that the same files can be re-run for the reproducibility check.
"""

import csv
import math
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE
from tagzrp import spectral
from tagzrp.cli import run_cli
from tagzrp.coupling import primed_comparison
from tagzrp.estimators import ReportRow, render_csv, verdict
from tagzrp.model import LatticeSpec, validate_kernel, validate_rate
from tagzrp.simulator import Model

pytestmark = pytest.mark.acceptance

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
SIGMA_MODELS = [("min(k,3)", 0.5), ("min(k,3)", 0.8), ("ind(k>=1)", 0.5), ("ind(k>=1)", 0.8)]


def record(key, ok, detail):
    ACCEPTANCE[key] = (bool(ok), detail)
    assert ok, detail


class Runner:
    def __init__(self, root: Path):
        self.root = root
        self.runs = {}

    def run(self, cmd, text, name):
        cfg = self.root / f"{name}.cfg"
        cfg.write_text(text)
        out = self.root / f"{name}.csv"
        t0 = time.perf_counter()
        code = run_cli([cmd, "-c", str(cfg), "-o", str(out)])
        elapsed = time.perf_counter() - t0
        self.runs[name] = (cmd, cfg, out)
        return code, read_rows(out), elapsed

    def rerun(self, name):
        cmd, cfg, out = self.runs[name]
        again = out.with_suffix(".again.csv")
        run_cli([cmd, "-c", str(cfg), "-o", str(again)])
        return out.read_bytes(), again.read_bytes()


def read_rows(path):
    lines = [l for l in Path(path).read_text().splitlines() if not l.startswith("#")]
    return list(csv.DictReader(lines))


def pick(rows, test, t=None):
    hits = [r for r in rows if r["test"] == test and (t is None or float(r["t"]) == t)]
    assert len(hits) == 1, (test, t, len(hits))
    return hits[0]


def model_cfg(rate, alpha, side, **experiment):
    lines = ["[model]", f'rate = "{rate}"', 'kernel = "1 1.0"', f"alpha = {alpha}",
             f"side = {side}", "", "[experiment]"]
    lines += [f"{k.replace('_', '-')} = {v}" for k, v in experiment.items()]
    return "\n".join(lines) + "\n"


def slug(rate, alpha):
    return "".join(c for c in rate if c.isalnum()) + f"_{alpha}"


@pytest.fixture(scope="module")
def runner(tmp_path_factory):
    return Runner(tmp_path_factory.mktemp("acceptance"))


# ---------------------------------------------------------------- 1


def test_criterion_01_poisson_degeneration(runner):
    code, rows, elapsed = runner.run("simulate", (CONFIGS / "poisson.cfg").read_text(), "c01")
    mean = pick(rows, "poisson-mean", 50.0)
    var = pick(rows, "poisson-var", 50.0)
    ks = pick(rows, "poisson-ks-pvalue", 50.0)
    ok = (abs(float(mean["estimate"]) - 50) <= 3 * float(mean["se"])
          and abs(float(var["estimate"]) - 50) <= 3 * float(var["se"])
          and float(ks["estimate"]) > 0.01 and elapsed <= 120)
    record(1, ok, f"mean {float(mean['estimate']):.3f}±{float(mean['se']):.3f}, "
                  f"var {float(var['estimate']):.2f}±{float(var['se']):.2f}, "
                  f"KS p {float(ks['estimate']):.3f}, {elapsed:.0f}s, exit {code}")


# ---------------------------------------------------------------- 2


def test_criterion_02_palm_stationarity(runner):
    text = model_cfg("ind(k>=1)", 0.5, 64, T=20, replicas=10_000, seed=2, probes=5)
    code, rows, _ = runner.run("simulate", text, "c02")
    p = float(pick(rows, "site-gof-pvalue[5]", 20.0)["estimate"])
    record(2, p > 0.01, f"site-5 chi-square p {p:.3f} at t=20, exit {code}")


# ---------------------------------------------------------------- 3, 11 (first half)


def variance_text(rate, alpha, side):
    return model_cfg(rate, alpha, side, T=50, checkpoints="5, 10, 20, 50",
                     replicas=100_000, seed=3, engine="site-streams", window="10, 50")


@pytest.fixture(scope="module")
def c03(runner):
    out = {}
    t0 = time.perf_counter()
    for rate, alpha in SIGMA_MODELS:
        out[rate, alpha] = runner.run("variance", variance_text(rate, alpha, 64),
                                      "c03_" + slug(rate, alpha))[1]
    return out, time.perf_counter() - t0


def test_criterion_03_lower_bound_and_identity(c03):
    results, elapsed = c03
    ok = elapsed <= 600
    worst_lb = math.inf
    worst_id = 0.0
    for rows in results.values():
        for t in (5.0, 10.0, 20.0, 50.0):
            lb = pick(rows, "variance-lower-bound", t)
            z = (float(lb["estimate"]) - float(lb["target"])) / float(lb["se"])
            worst_lb = min(worst_lb, z)
            ident = pick(rows, "variance-identity", t)
            zi = abs(float(ident["estimate"])) / float(ident["se"])
            worst_id = max(worst_id, zi)
            ok = ok and z >= -3 and zi <= 3
    record(3, ok, f"min (V-floor)/SE {worst_lb:.1f} (>= -3), max |identity|/SE "
                  f"{worst_id:.2f} (<= 3), {elapsed:.0f}s")


# ---------------------------------------------------------------- 4


def test_criterion_04_boundedness(runner):
    ok = True
    parts = []
    for rate, alpha in SIGMA_MODELS:
        text = model_cfg(rate, alpha, 128, T=100, checkpoints="10, 20, 50, 100",
                         replicas=20_000, seed=4, window="10, 100", ratio_gate=2.0)
        _, rows, _ = runner.run("variance", text, "c04_" + slug(rate, alpha))
        b = pick(rows, "variance-boundedness")
        ses = [float(pick(rows, "variance-per-time", t)["se"]) for t in (10.0, 20.0, 50.0, 100.0)]
        ok = ok and float(b["estimate"]) <= 2.0 and all(math.isfinite(s) for s in ses)
        parts.append(f"{rate}@{alpha}: {float(b['estimate']):.3f}±{float(b['se']):.3f}")
    record(4, ok, "max/min V/t " + ", ".join(parts))


# ---------------------------------------------------------------- 5


def clt_text(side):
    return model_cfg("min(k,3)", 0.8, side, T=100, replicas=20_000, seed=5,
                     engine="site-streams", require_id="true", level=0.01, ci_level=0.99)


@pytest.fixture(scope="module")
def c05(runner):
    return runner.run("clt", clt_text(128), "c05")


def test_criterion_05_clt(c05):
    code, rows, _ = c05
    p = float(pick(rows, "clt-ks-pvalue")["estimate"])
    low = pick(rows, "clt-sigma2-ci-low")
    s2 = pick(rows, "clt-sigma2")
    ok = p > 0.01 and float(low["estimate"]) > float(low["target"]) and code == 0
    record(5, ok, f"KS p {p:.3f}, sigma2 {float(s2['estimate']):.4f}, 99% CI low "
                  f"{float(low['estimate']):.4f} > alpha/rho {float(low['target']):.4f}")


# ---------------------------------------------------------------- 6


def test_criterion_06_coupling_invariants(runner):
    code, rows, _ = runner.run("coupling-check", (CONFIGS / "coupling.cfg").read_text(), "c06")
    bad = sum(int(r["violations"]) for r in rows)
    min_rate = min(float(r["min_rate"]) for r in rows)
    min_gap = min(int(r["min_gap"]) for r in rows)
    events = sum(int(r["events"]) for r in rows)
    ok = len(rows) == 10_000 and bad == 0 and min_rate >= 0 and min_gap >= 0 and code == 0
    record(6, ok, f"{len(rows)} runs, {events} events, {bad} violations, "
                  f"min gap {min_gap}, min channel rate {min_rate:.3g}")


# ---------------------------------------------------------------- 7


def c07_csv():
    m = Model.build(validate_rate("min(k,3)"), validate_kernel({1: 1.0}), LatticeSpec(1, 64),
                    alpha=0.8)
    curve = primed_comparison(m, 1.0, 100_000, seed=7)
    gap, se = float(curve.mean_gap[-1]), float(curve.se[-1])
    rows = [ReportRow("primed-gap", 1.0, gap, se, 0.0, verdict(gap > 3 * se)),
            ReportRow("primed-gap-min", 1.0, float(curve.min_gap), math.nan, 0.0,
                      verdict(curve.min_gap >= 0 and curve.violations == 0))]
    return curve, render_csv(rows, config_text="primed 1.0 100000 7\n")


def test_criterion_07_primed_gap():
    curve, _ = c07_csv()
    gap, se = float(curve.mean_gap[-1]), float(curve.se[-1])
    # gap = x_Q'(1) - x_Q(1): the palm origin holds more particles, so its
    # tagged particle is the slower one and the coupled gap is nonnegative
    ok = gap > 3 * se and curve.min_gap >= 0 and curve.violations == 0
    record(7, ok, f"E[x_Q'(1)] - E[x_Q(1)] = {gap:.5f} ± {se:.5f} ({gap / se:.1f} SE), "
                  f"min per-replica gap {curve.min_gap}; E[x_Q(1)] - E[x_Q'(1)] = {-gap:.5f}")


# ---------------------------------------------------------------- 8


def test_criterion_08_adjoint_identities(runner):
    ok = True
    worst = 0.0
    count = 0
    for rate, alpha in [("k", 1.0), ("ind(k>=1)", 0.5), ("min(k,3)", 0.8)]:
        text = model_cfg(rate, alpha, 16, samples=1_000_000, seed=8)
        code, rows, _ = runner.run("identities", text, "c08_" + slug(rate, alpha))
        for r in rows:
            se = float(r["se"])
            z = abs(float(r["estimate"])) / se if se > 0 else (0.0 if float(r["estimate"]) == 0 else math.inf)
            worst = max(worst, z)
            count += 1
        ok = ok and code == 0 and all(r["verdict"] == "pass" for r in rows)
    record(8, ok, f"{count} residuals, max |residual|/SE {worst:.2f} (<= 3)")


# ---------------------------------------------------------------- 9


def test_criterion_09_spectral_exactness(runner):
    NN = {(1,): 0.5, (-1,): 0.5}
    text = ('[model]\nrate = "k"\nkernel = "1 0.5; -1 0.5"\n\n[experiment]\n'
            "n-list = 3, 4, 5, 6\nM-list = 1, 2, 3, 4, 5, 6\n")
    code, rows, _ = runner.run("spectral-gap", text, "c09")
    resid = max(float(r["reversibility_residual"]) for r in rows)
    gap_err = max(abs(float(r["gap"]) - spectral.one_particle_gap(NN, int(r["n"])))
                  / spectral.one_particle_gap(NN, int(r["n"])) for r in rows)
    for rate in ("ind(k>=1)", "min(k,3)"):
        g = validate_rate(rate)
        for n in range(3, 7):
            for M in range(1, 7):
                resid = max(resid, spectral.build_generator(g, NN, n, M).reversibility_residual)
    part1 = resid < 1e-12
    part2 = gap_err < 1e-8 and len(rows) == 24

    G = spectral.build_generator(validate_rate("min(k,3)"), NN, 4, 5)
    rng = np.random.default_rng(9)
    excess = -math.inf
    for i in range(100):
        f = G.center(rng.standard_normal(G.n_states))
        lam = float(10 ** rng.uniform(-2, 2))
        val = spectral.resolvent_norm(f, G, lam, rng=rng).value
        excess = max(excess, val - G.inner(f, f) / lam)
    part3 = excess <= 1e-10

    toy = spectral.reference_generator(validate_rate("ind(k>=1)"), validate_kernel({1: 1.0}), 4, 3)
    S = toy.symmetric_part()
    fs = [spectral.h_observable(toy, validate_rate("ind(k>=1)"))]
    fs += [toy.center(rng.standard_normal(toy.n_states)) for _ in range(20)]
    gap4 = -math.inf
    for f in fs:
        for lam in (0.01, 0.1, 0.5, 1.0, 2.0, 10.0):
            full = spectral.resolvent_form(f, toy.Q, lam, toy.pi)
            sym = spectral.resolvent_form(f, S, lam, toy.pi)
            gap4 = max(gap4, full - sym)
    part4 = gap4 <= 1e-10
    ok = part1 and part2 and part3 and part4 and code == 0
    record(9, ok, f"(i) residual {resid:.1e} (ii) gap rel err {gap_err:.1e} "
                  f"(iii) max excess {excess:.1e} (iv) max full-sym {gap4:.1e}")


# ---------------------------------------------------------------- 10


def test_criterion_10_ub1(runner):
    code, rows, _ = runner.run("ub1", (CONFIGS / "ub1.cfg").read_text(), "c10")
    ts = [float(r["t"]) for r in rows]
    agree = [abs(float(r["sigma2_mc"]) - float(r["sigma2"])) / float(r["se"]) for r in rows]
    ratios = [float(r["ratio"]) for r in rows]
    ok = (ts == [1.0, 2.0, 5.0, 10.0] and max(agree) < 3 and all(map(math.isfinite, ratios))
          and all(r["ordered"] == "true" for r in rows) and code == 0)
    record(10, ok, f"max |MC - exact|/SE {max(agree):.2f}, ratios "
                   + ", ".join(f"{x:.4f}" for x in ratios)
                   + f" ({spectral.is_monotone(ratios)}), C1 >= {max(ratios):.4f}")


# ---------------------------------------------------------------- 11


def keyed(rows):
    out = {}
    for r in rows:
        t = "" if r["test"] == "superadditivity-limit" else r["t"]
        out[r["test"], t] = r
    return out


def test_criterion_11_finite_size(runner, c03, c05):
    pairs = []
    for rate, alpha in SIGMA_MODELS:
        _, rows, _ = runner.run("variance", variance_text(rate, alpha, 128),
                                "c11_" + slug(rate, alpha))
        pairs.append((c03[0][rate, alpha], rows))
    _, rows, _ = runner.run("clt", clt_text(256), "c11_clt")
    pairs.append((c05[1], rows))
    worst = 0.0
    where = None
    count = 0
    for small, big in pairs:
        a, b = keyed(small), keyed(big)
        assert a.keys() == b.keys()
        for k in a:
            s1, s2 = float(a[k]["se"]), float(b[k]["se"])
            if not (math.isfinite(s1) and math.isfinite(s2)):
                continue
            z = abs(float(a[k]["estimate"]) - float(b[k]["estimate"])) / math.hypot(s1, s2)
            count += 1
            if z > worst:
                worst, where = z, k
    record(11, worst < 2 and count > 0,
           f"{count} estimates, max shift {worst:.2f} combined SE at {where}")


# ---------------------------------------------------------------- 12


def test_criterion_12_reproducibility(runner):
    names = [n for n in ("c01", "c02", "c06", "c09", "c10", "c08_k_1.0") if n in runner.runs]
    same = []
    for name in names:
        a, b = runner.rerun(name)
        same.append(a == b)
    _, first = c07_csv()
    _, second = c07_csv()
    same.append(first == second)
    ok = len(names) == 6 and all(same)
    record(12, ok, f"{sum(same)}/{len(same)} re-runs byte-identical")
