"""Acceptance criteria 1-13.

Each test checks one criterion at its stated tolerance and runtime budget and
records a pass/fail line; the lines are printed in the terminal summary.
"""

import filecmp
import math
import subprocess
import sys
import time
import warnings
from pathlib import Path

import numpy as np
import pytest
from sklearn.exceptions import ConvergenceWarning

from cfimpact.evaluation import period_metrics, predict_counterfactual, run_backtest, sample_periods, scaling_factor
from cfimpact.ffnn import FfnnConfig, chronological_split, init_model, train
from cfimpact.linear import fit_cr, fit_did, fit_sc
from cfimpact.mcnnm import default_lambda_grid, shrink, soft_impute
from cfimpact.rsc import denoise, svd, threshold_for_rank
from cfimpact.simulation import cr_prediction_interval, estimate_impact, inject_treatment
from cfimpact.synth import GeneratorConfig, generate

from .test_ffnn import finite_difference_check, linear_teacher

RESULTS: list[dict] = []


class Criterion:
    """Collects named checks, times the body and records one summary line."""

    def __init__(self, number, title, limit=None):
        self.number, self.title, self.limit = number, title, limit
        self.failed: list[str] = []
        self.notes: list[str] = []

    def check(self, ok, what):
        if not ok:
            self.failed.append(what)
        return ok

    def note(self, text):
        self.notes.append(text)

    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        seconds = time.perf_counter() - self.start
        if exc is not None:
            self.failed.append(f"{exc_type.__name__}: {exc}")
        if self.limit is not None and seconds >= self.limit:
            self.failed.append(f"runtime {seconds:.1f}s exceeds {self.limit}s")
        passed = not self.failed
        budget = f" (limit {self.limit}s)" if self.limit else ""
        line = f"C{self.number:<2} {'PASS' if passed else 'FAIL'}  {seconds:8.2f}s{budget}  {self.title}"
        if self.notes:
            line += "  [" + "; ".join(self.notes) + "]"
        if not passed:
            line += "  failed: " + "; ".join(self.failed[:3])
        RESULTS.append({"number": self.number, "passed": passed, "seconds": seconds, "line": line})
        print(line)
        if exc is None and not passed:
            raise AssertionError(line)
        return False


# ---------------------------------------------------------------------------


def test_c01_closed_forms():
    with Criterion(1, "DID closed form to 1e-10, CR(lambda=0) vs least squares to 1e-8", 5) as c:
        worst_did = worst_cr = 0.0
        for seed in range(100):
            r = np.random.default_rng(seed)
            nc = int(r.integers(1, 11))
            t0 = int(r.integers(nc + 2, 51))
            x = r.normal(size=(nc, t0))
            y = r.normal(size=t0) + x.mean(axis=0)

            fit = fit_did(y, x)
            mu = sum(y[t] - sum(x[j, t] for j in range(nc)) / nc for t in range(t0)) / t0
            worst_did = max(worst_did, abs(fit.intercept - mu), np.abs(fit.weights - 1.0 / nc).max())

            fit = fit_cr(y, x)
            design = np.column_stack([np.ones(t0), x.T])
            theta = np.linalg.lstsq(design, y, rcond=None)[0]
            worst_cr = max(worst_cr, abs(fit.intercept - theta[0]), np.abs(fit.weights - theta[1:]).max())
        c.check(worst_did <= 1e-10, f"DID max deviation {worst_did:.2e}")
        c.check(worst_cr <= 1e-8, f"CR max deviation {worst_cr:.2e}")
        c.note(f"DID {worst_did:.1e}, CR {worst_cr:.1e}")


def test_c02_sc_grid_oracle():
    with Criterion(2, "SC objective vs 1e-4 grid search within 1e-6, simplex feasible", 30) as c:
        grid = np.linspace(0.0, 1.0, 10001)
        weights = np.vstack([grid, 1.0 - grid])
        worst = 0.0
        for seed in range(200):
            r = np.random.default_rng(seed)
            t0 = int(r.integers(5, 51))
            x = r.normal(size=(2, t0))
            y = r.normal(size=t0) + r.uniform(-1, 2) * x[0]
            fit = fit_sc(y, x)
            w = fit.weights
            c.check(w.min() >= 0 and abs(w.sum() - 1) <= 1e-12, f"seed {seed}: weights {w} off the simplex")
            f_sc = float(np.sum((y - w @ x) ** 2))
            f_grid = float(np.min(np.sum((y[:, None] - x.T @ weights) ** 2, axis=0)))
            worst = max(worst, abs(f_sc - f_grid))
            c.check(f_sc <= f_grid + 1e-12, f"seed {seed}: solver worse than grid")
        c.check(worst <= 1e-6, f"objective gap {worst:.2e}")
        c.note(f"max |gap| {worst:.1e}")


def test_c03_exact_recovery():
    with Criterion(3, "noiseless convex-combination panel: SC and CR tAPE < 1e-6 over 181 days", 5) as c:
        cfg = GeneratorConfig(n_treated=3, n_control=5, n_periods=881, rank=5, noise_scale=0.0, treated_as_combination=True, seed=2)
        p, latent = generate(cfg)
        truth = latent[:3, p.t0 :].sum(axis=0)
        c.check(p.t1 == 181, "treatment window is not 181 days")
        for method in ("SC", "CR"):
            cf = predict_counterfactual(p, method, "S2")
            tape = period_metrics(cf.total, truth).tape
            c.check(tape < 1e-6, f"{method} tAPE {tape:.2e}")
            c.note(f"{method} {tape:.1e}%")


def test_c04_soft_impute():
    with Criterion(4, "SOFT-IMPUTE monotone objective, lambda=0 fixed point, rank-1 completion", 60) as c:
        for seed in range(50):
            r = np.random.default_rng(seed)
            y = r.normal(size=(15, 25))
            mask = r.random(y.shape) > 0.3
            lam = default_lambda_grid(y, mask)[int(r.integers(2, 10))]
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", ConvergenceWarning)
                trace = np.array(soft_impute(y, mask, lam, max_iter=300).objective)
            c.check(np.all(np.diff(trace) <= 1e-12 * np.abs(trace[:-1])), f"seed {seed}: objective increased")

        r = np.random.default_rng(0)
        y = r.normal(size=(10, 30))
        fixed = soft_impute(y, np.ones_like(y, dtype=bool), 0.0)
        c.check(np.array_equal(fixed.matrix, y) and fixed.n_iter == 1, "lambda=0 is not a fixed point")

        y = np.outer(r.uniform(1, 3, 30), r.uniform(1, 3, 40))
        mask = r.random(y.shape) > 0.2
        fit = soft_impute(y, mask, default_lambda_grid(y, mask)[0] * 1e-3, max_iter=2000)
        rel = np.abs(fit.matrix[~mask] - y[~mask]) / y[~mask]
        c.check(rel.max() < 0.01, f"rank-1 completion error {rel.max():.3%}")
        c.note(f"rank-1 max rel error {rel.max():.2e}")


def test_c05_shrink():
    with Criterion(5, "shrink operator singular values max(s - lambda, 0) within 1e-10", 5) as c:
        worst = 0.0
        for seed in range(100):
            r = np.random.default_rng(seed)
            a = r.normal(size=tuple(r.integers(2, 30, size=2)))
            s = np.linalg.svd(a, compute_uv=False)
            lam = float(r.uniform(0, s[0] * 1.2))
            got = np.linalg.svd(shrink(a, lam), compute_uv=False)
            worst = max(worst, np.abs(got - np.maximum(s - lam, 0.0)).max())
        c.check(worst <= 1e-10, f"max deviation {worst:.2e}")
        c.note(f"max deviation {worst:.1e}")


def test_c06_rsc_denoising():
    with Criterion(6, "RSC rank-2 truncation beats full rank over 50 seeds; noiseless exact to 1e-8", 30) as c:
        wins = 0
        for seed in range(50):
            r = np.random.default_rng(seed)
            m = r.normal(size=(20, 2)) @ r.normal(size=(2, 120))
            y = m + 0.5 * r.normal(size=m.shape)
            k2 = denoise(y, threshold_for_rank(svd(y).singular_values, 2)).matrix
            full = denoise(y, 0.0).matrix
            wins += np.linalg.norm(k2 - m) < np.linalg.norm(full - m)
        c.check(wins == 50, f"truncation better in only {wins}/50 seeds")
        r = np.random.default_rng(99)
        m = r.normal(size=(20, 2)) @ r.normal(size=(2, 120))
        exact = denoise(m, threshold_for_rank(svd(m).singular_values, 2)).matrix
        err = np.abs(exact - m).max()
        c.check(err <= 1e-8, f"noiseless error {err:.2e}")
        c.note(f"{wins}/50 wins, noiseless {err:.1e}")


def test_c07_ffnn():
    with Criterion(7, "FFNN gradient check within 1e-4, linear teacher valid MSE < 1e-3 var", 60) as c:
        r = np.random.default_rng(0)
        cfg = FfnnConfig(hidden_size=6, hidden_layers=2, context_size=3, dropout=0.2, seed=1)
        model = init_model(cfg, 4, 5, 2)
        cal, lag, y = r.normal(size=(3, 4)), r.normal(size=(3, 5)), r.normal(size=(3, 2))
        _, cache = model.forward(cal, lag, rng=np.random.default_rng(2))
        worst = finite_difference_check(model, cal, lag, y, cache["masks"])
        c.check(worst < 1e-4, f"gradient relative error {worst:.2e}")

        tr, va = chronological_split(linear_teacher(np.random.default_rng(12345)))
        cfg = FfnnConfig(hidden_size=64, hidden_layers=1, context_size=4, batch_size=32, learning_rate=0.05, seed=0)
        res = train(cfg, tr, va)
        ratio = res.valid_mse / va.target.var()
        c.check(ratio < 1e-3, f"valid MSE / var = {ratio:.2e}")
        c.note(f"grad {worst:.1e}, mse/var {ratio:.1e}")


def test_c08_lognormal_ground_truth():
    with Criterion(8, "realized impacts 1.0/2.0/3.0/5.1% +/- 0.1pp over 30 units x 181 days", 5) as c:
        p, _ = generate(GeneratorConfig(n_treated=30, n_control=5, n_periods=881, t0=700, seed=0))
        got = []
        for mu, expected in zip((0.01, 0.02, 0.03, 0.05), (1.0, 2.0, 3.0, 5.1)):
            _, sim = inject_treatment(p, mu, 0.0005)
            got.append(sim.relative_impact)
            c.check(abs(sim.relative_impact - expected) <= 0.1, f"mu={mu}: {sim.relative_impact:.3f}% vs {expected}%")
        c.note(", ".join(f"{v:.2f}%" for v in got))


@pytest.fixture(scope="module")
def calibrated_panel():
    return generate(GeneratorConfig(n_treated=5, n_control=50, n_periods=881, t0=700, seed=1))[0]


def test_c09_impact_recovery(calibrated_panel):
    with Criterion(9, "CR and RSC impact estimates within 0.7pp of ground truth", 600) as c:
        p = calibrated_panel
        seeds = np.random.SeedSequence(0).generate_state(4)
        errors = {"CR": [], "RSC": []}
        for mu, s in zip((0.01, 0.02, 0.03, 0.05), seeds):
            treated, sim = inject_treatment(p, mu, 0.0005, int(s))
            for method in errors:
                rep = estimate_impact(treated, predict_counterfactual(treated, method, "S1"))
                err = rep.relative_impact - sim.relative_impact
                errors[method].append(err)
                c.check(abs(err) <= 0.7, f"{method} mu={mu}: error {err:+.2f}pp")
        for method, errs in errors.items():
            c.note(f"{method} max |err| {max(map(abs, errs)):.2f}pp")


def test_c10_backtest(calibrated_panel):
    with Criterion(10, "CR and RSC mean tAPE <= 2% over 5 pseudo-periods", 600) as c:
        p = calibrated_panel
        periods = sample_periods(p, 5, 181, earliest=365, seed=0)
        agg = run_backtest(p, periods, ["CR", "RSC"], scenario="S1").aggregates()
        for method in ("CR", "RSC"):
            c.check(agg[method]["n_periods"] == 5, f"{method} failed on some periods")
            c.check(agg[method]["tape"] <= 2.0, f"{method} mean tAPE {agg[method]['tape']:.2f}%")
            c.note(f"{method} {agg[method]['tape']:.2f}%")


def _normal_residual_instance(r, t0, t1=181, nc=5, sigma=10.0):
    x = r.uniform(50, 150, (nc, t0 + t1))
    y = 20.0 + r.dirichlet(np.ones(nc)) @ x + sigma * r.standard_normal(t0 + t1)
    fit = fit_cr(y[:t0], x[:, :t0])
    lo, hi = cr_prediction_interval(fit, x[:, :t0], x[:, t0:], level=0.99)
    return lo, hi, float(y[t0:].sum())


def test_c11_interval_coverage():
    with Criterion(11, "99% CR interval coverage >= 95% over 200 replications; width falls with T0", 300) as c:
        r = np.random.default_rng(0)
        hits = 0
        for _ in range(200):
            lo, hi, total = _normal_residual_instance(r, 200)
            hits += lo <= total <= hi
        c.check(hits >= 190, f"coverage {hits / 200:.1%}")
        widths = []
        for t0 in (100, 200, 400, 800):
            w = [np.subtract(*_normal_residual_instance(r, t0)[1::-1]) for _ in range(200)]
            widths.append(float(np.mean(w)))
        c.check(all(a > b for a, b in zip(widths, widths[1:])), f"widths {widths}")
        c.note(f"coverage {hits / 200:.1%}, widths " + "/".join(f"{w:.0f}" for w in widths))


def test_c12_metric_identities():
    with Criterion(12, "tAPE = |tPE|, S2 totals = unit sums, RMSE^s scale invariant", 1) as c:
        p, _ = generate(GeneratorConfig(n_treated=3, n_control=6, n_periods=500, t0=440, seed=5))
        periods = sample_periods(p, 3, 60, earliest=365, seed=0)
        methods = ["DID", "CR"]
        reports = {sc: run_backtest(p, periods, methods, scenario=sc) for sc in ("S1", "S2")}
        for rep in reports.values():
            for row in rep.rows:
                c.check(row["tape"] == abs(row["tpe"]), f"{row['method']} period {row['period']}: tAPE != |tPE|")
        for per in periods:
            cf = predict_counterfactual(p.window(per.start, per.stop), "CR", "S2")
            unit_sum = cf.values[0] + cf.values[1] + cf.values[2]
            gap = np.abs(cf.total - unit_sum).max() / np.abs(unit_sum).max()
            c.check(gap <= 4 * np.finfo(float).eps, f"S2 total differs from unit sum by {gap:.1e}")
            truth = p.outcomes[:3, per.start : per.stop].sum(axis=0)
            row = next(r for r in reports["S2"].rows if r["method"] == "CR" and r["period"] == per.index)
            c.check(row["tpe"] == period_metrics(unit_sum, truth, reports["S2"].scale).tpe, "S2 row not computed from unit sums")
        scaled = p.replace(outcomes=p.outcomes * 37.5)
        rep2 = run_backtest(scaled, periods, methods, scenario="S2")
        c.check(math.isclose(scaling_factor(scaled), 37.5 * scaling_factor(p), rel_tol=1e-12), "scaling factor not proportional")
        for a, b in zip(reports["S2"].rows, rep2.rows):
            c.check(math.isclose(a["rmse_s"], b["rmse_s"], rel_tol=1e-9), f"{a['method']}: RMSE^s changed under rescaling")


CLI_RUNS = {
    "generate": ["generate", "--n-control", "8", "--n-periods", "500", "--t0", "440", "--sparse-fraction", "0.25"],
    "select-controls": ["select-controls", "--top-k", "3"],
    "fit": ["fit", "--method", "RSC"],
    "fit-ffnn": ["fit", "--method", "FFNN", "--scenario", "S2", "--ffnn-trials", "3", "--ffnn-members", "2", "--ffnn-max-epochs", "5"],
    "backtest": ["backtest", "--methods", "DID,SC,CR,CR-EN,RSC,MCNNM", "--periods", "2", "--length", "60", "--scenario", "S2", "--workers", "2"],
    "sweep-length": ["sweep-length", "--methods", "CR,RSC", "--length", "60", "--lengths", "10,30,60"],
    "simulate-impact": ["simulate-impact", "--method", "CR,RSC", "--mu", "0.01,0.05"],
}
SMALL_PANEL = ["--n-treated", "2", "--n-control", "8", "--n-periods", "500", "--t0", "440", "--seed", "11"]


def _run_cli(args, out: Path):
    cmd = [sys.executable, "-m", "cfimpact", *args, "--out", str(out)]
    if args[0] != "generate":
        cmd += SMALL_PANEL
    else:
        cmd += ["--seed", "11"]
    return subprocess.run(cmd, capture_output=True, text=True)


def test_c13_cli_determinism(tmp_path):
    with Criterion(13, "every CLI subcommand gives byte-identical CSV outputs across two runs") as c:
        n_files = 0
        for name, args in CLI_RUNS.items():
            outs = [tmp_path / f"{name}-{k}" for k in (1, 2)]
            for out in outs:
                proc = _run_cli(args, out)
                c.check(proc.returncode == 0, f"{name} exited {proc.returncode}: {proc.stderr.strip()[-200:]}")
            csvs = sorted(f.name for f in outs[0].glob("*.csv"))
            c.check(bool(csvs), f"{name} wrote no CSV")
            c.check(csvs == sorted(f.name for f in outs[1].glob("*.csv")), f"{name} wrote different files")
            _, mismatch, errors = filecmp.cmpfiles(outs[0], outs[1], csvs, shallow=False)
            c.check(not mismatch and not errors, f"{name}: {mismatch + errors} differ")
            n_files += len(csvs)
        c.note(f"{len(CLI_RUNS)} runs, {n_files} CSV files compared")
