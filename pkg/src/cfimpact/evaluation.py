"""Backtesting on pseudo-treatment periods, scenario handling and error metrics."""

from __future__ import annotations

import csv
import datetime as dt
import json
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from sklearn.exceptions import ConvergenceWarning

from .ffnn import FeedForwardCounterfactual
from .linear import (
    CounterfactualSeries,
    cv_elastic_net,
    fit_cr,
    fit_did,
    fit_sc,
    predict_linear,
    predict_yoy,
)
from .mcnnm import cv_lambda, predict_mcnnm, soft_impute
from .panel import PanelError, PanelMatrix, aggregate_treated, block_views
from .rsc import cv_gamma, denoise, fit_rsc, predict_rsc

__all__ = [
    "METHODS",
    "REFERENCE_THRESHOLDS",
    "PseudoPeriod",
    "PeriodMetrics",
    "MetricsReport",
    "sample_periods",
    "scaling_factor",
    "scale_rmse",
    "period_metrics",
    "predict_counterfactual",
    "run_backtest",
    "length_sweep",
    "write_metrics",
    "write_unit_metrics",
    "write_sweep",
    "write_plot_data",
]

# Reference tAPE levels (percent) drawn as horizontal guides in plots.
REFERENCE_THRESHOLDS = (1.0, 2.0, 3.0)


# ---------------------------------------------------------------------------
# Methods: each maps a one-treated-row panel to a 1 x T1 counterfactual
# ---------------------------------------------------------------------------


def _require_observed_pre(p: PanelMatrix, method: str):
    if not p.observed[:, : p.t0].all() or not p.observed[p.n_treated :, p.t0 :].all():
        raise PanelError(f"{method} needs fully observed pre-treatment data and post-treatment controls")


def _did(p, **_):
    _require_observed_pre(p, "DID")
    pre_t, pre_c, post_c, _ = block_views(p)
    return predict_linear(fit_did(pre_t[0], pre_c), post_c)


def _sc(p, **_):
    _require_observed_pre(p, "SC")
    pre_t, pre_c, post_c, _ = block_views(p)
    return predict_linear(fit_sc(pre_t[0], pre_c), post_c)


def _cr(p, **_):
    _require_observed_pre(p, "CR")
    pre_t, pre_c, post_c, _ = block_views(p)
    return predict_linear(fit_cr(pre_t[0], pre_c), post_c)


def _cr_en(p, enet_grid=None, **_):
    _require_observed_pre(p, "CR-EN")
    pre_t, pre_c, post_c, _ = block_views(p)
    alpha, lam = cv_elastic_net(p, enet_grid)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        fit = fit_cr(pre_t[0], pre_c, penalty=lam, l1_ratio=alpha)
    return predict_linear(fit, post_c)


def _rsc(p, rsc_ranks=None, rsc_eta_grid=None, **_):
    pre_t = p.outcomes[0, : p.t0]
    if not p.observed[0, : p.t0].all():
        raise PanelError("RSC needs an observed pre-treatment treated series")
    if not p.observed[p.n_treated :, p.t0 :].all():
        raise PanelError("RSC needs observed post-treatment controls")
    block = p.outcomes[p.n_treated :]
    mask = p.observed[p.n_treated :]
    gamma, eta, _ = cv_gamma(block, pre_t, rsc_ranks, rsc_eta_grid, mask=mask)
    den = denoise(block, gamma, mask)
    return predict_rsc(fit_rsc(pre_t, den, eta), den, p.t0)


def _mcnnm(p, mcnnm_folds=5, mcnnm_grid=None, seed=0, **_):
    mask = p.observed & ~p.treatment_mask.status
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        lam = cv_lambda(p.outcomes, mask, mcnnm_folds, mcnnm_grid, seed)
        latent = soft_impute(p.outcomes, mask, lam)
    return predict_mcnnm(latent, p.treatment_mask, "S1")


def _yoy(p, **_):
    return predict_yoy(p)


def _ffnn(p, ffnn_trials=60, ffnn_members=15, ffnn_max_epochs=500, seed=0, **_):
    est = FeedForwardCounterfactual(ffnn_trials, ffnn_members, max_epochs=ffnn_max_epochs, random_state=seed)
    return est.fit(p).counterfactual_


METHODS: dict[str, Callable[..., CounterfactualSeries]] = {
    "DID": _did,
    "SC": _sc,
    "CR": _cr,
    "CR-EN": _cr_en,
    "RSC": _rsc,
    "MCNNM": _mcnnm,
    "FFNN": _ffnn,
    "YOY": _yoy,
}
# Methods that handle several treated rows in one fit.
_MULTIVARIATE = {"FFNN", "YOY"}


def _canonical(method: str) -> str:
    name = method.strip().upper().replace("_", "-")
    if name == "CREN":
        name = "CR-EN"
    if name not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {sorted(METHODS)}")
    return name


def predict_counterfactual(p: PanelMatrix, method: str, scenario: str = "S2", **options) -> CounterfactualSeries:
    """Fit ``method`` on the pre-treatment window of ``p`` and predict the treatment window.

    S1 fits on the aggregated treated series. S2 fits each treated unit
    separately against the controls (multivariate methods fit once) and
    returns one row per treated unit.
    """
    name = _canonical(method)
    scenario = scenario.upper()
    if scenario not in ("S1", "S2"):
        raise ValueError("scenario must be S1 or S2")
    fn = METHODS[name]
    if scenario == "S1":
        cf = fn(aggregate_treated(p), **options)
        return CounterfactualSeries(cf.values, "S1", name)
    if name in _MULTIVARIATE:
        cf = fn(p, **options)
        return CounterfactualSeries(cf.values, "S2", name)
    controls = range(p.n_treated, p.n_units)
    rows = [fn(p.select_units([i], controls), **options).values[0] for i in range(p.n_treated)]
    return CounterfactualSeries(np.vstack(rows), "S2", name)


# ---------------------------------------------------------------------------
# Periods and metrics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PseudoPeriod:
    """Backtest window: columns ``[start, start + length)`` of the panel."""

    index: int
    start: int
    length: int
    start_date: dt.date
    seed: int | None = None

    @property
    def stop(self) -> int:
        return self.start + self.length


def sample_periods(
    p: PanelMatrix,
    count: int,
    length: int = 181,
    earliest: dt.date | int | None = None,
    seed: int | None = 0,
    latest_end: int | None = None,
) -> list[PseudoPeriod]:
    """Draw ``count`` distinct start days uniformly from the admissible window.

    A start ``s`` is admissible when ``s >= earliest`` and the period ends
    by ``latest_end`` (default: the panel's treatment start, so backtests
    only touch untreated history). Periods may overlap.
    """
    if count < 1 or length < 1:
        raise ValueError("count and length must be positive")
    if earliest is None:
        lo = 1
    elif isinstance(earliest, dt.date):
        lo = p.date_index(earliest)
    else:
        lo = int(earliest)
    lo = max(lo, 1)
    end = p.t0 if latest_end is None else int(latest_end)
    hi = end - length
    n_starts = hi - lo + 1
    if n_starts < count:
        raise PanelError(
            f"backtest window too short: {max(n_starts, 0)} admissible start day(s) for {count} period(s)"
        )
    rng = np.random.default_rng(seed)
    starts = np.sort(lo + rng.choice(n_starts, size=count, replace=False))
    return [PseudoPeriod(k, int(s), length, p.dates[int(s)], seed) for k, s in enumerate(starts)]


def scaling_factor(p: PanelMatrix, days: int = 365) -> float:
    """Mean daily total treated revenue over the first ``days`` panel days."""
    if p.n_periods < days:
        raise PanelError(f"panel spans {p.n_periods} days; RMSE scaling needs at least {days}")
    factor = float(p.outcomes[: p.n_treated, :days].sum(axis=0).mean())
    if factor == 0:
        raise PanelError("zero RMSE scaling factor")
    return factor


def scale_rmse(rmse: float, p: PanelMatrix | float) -> float:
    factor = p if isinstance(p, (int, float)) else scaling_factor(p)
    if factor == 0:
        raise PanelError("zero RMSE scaling factor")
    return rmse / factor


def _mape(pred: np.ndarray, truth: np.ndarray) -> tuple[float, int]:
    keep = truth != 0
    n_zero = int((~keep).sum())
    if not keep.any():
        return math.nan, n_zero
    return float(100.0 * np.mean(np.abs(pred[keep] - truth[keep]) / np.abs(truth[keep]))), n_zero


@dataclass
class PeriodMetrics:
    """Errors of one method on one period, computed on daily totals over treated units."""

    mape: float
    rmse: float
    rmse_s: float
    tpe: float
    n_zero_days: int

    @property
    def tape(self) -> float:
        return abs(self.tpe)


def period_metrics(pred_total, true_total, scale: float = 1.0) -> PeriodMetrics:
    """MAPE (percent, zero-revenue days skipped), RMSE, scaled RMSE and tPE."""
    pred = np.asarray(pred_total, dtype=float)
    truth = np.asarray(true_total, dtype=float)
    if pred.shape != truth.shape:
        raise ValueError("prediction and truth lengths differ")
    s = truth.sum()
    if s == 0:
        raise ValueError("period revenue sums to zero; tPE undefined")
    mape, n_zero = _mape(pred, truth)
    rmse = float(np.sqrt(np.mean((pred - truth) ** 2)))
    return PeriodMetrics(mape, rmse, rmse / scale, float(100.0 * (pred.sum() - s) / s), n_zero)


@dataclass
class MetricsReport:
    scenario: str
    scale: float
    periods: list[PseudoPeriod]
    rows: list[dict] = field(default_factory=list)
    unit_rows: list[dict] = field(default_factory=list)

    def aggregates(self) -> dict[str, dict[str, float]]:
        """Per method: means over successful periods (and units for MAPE^od)."""
        out = {}
        for m in dict.fromkeys(r["method"] for r in self.rows):
            ok = [r for r in self.rows if r["method"] == m and not r["error"]]
            agg = {k: float(np.mean([r[k] for r in ok])) if ok else math.nan for k in ("mape", "rmse_s", "tpe", "tape")}
            od = [u["mape_od"] for u in self.unit_rows if u["method"] == m]
            agg["mape_od"] = float(np.mean(od)) if od else math.nan
            agg["n_periods"] = len(ok)
            out[m] = agg
        return out


def _fit_period(p: PanelMatrix, period: PseudoPeriod, method: str, scenario: str, options: dict):
    window = p.window(period.start, period.stop)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ConvergenceWarning)
            cf = predict_counterfactual(window, method, scenario, **options)
        return cf, ""
    except (ValueError, np.linalg.LinAlgError, RuntimeError) as exc:
        return None, f"{type(exc).__name__}: {exc}"


def _cell(args):
    return _fit_period(*args)


def _fit_grid(p, periods, methods, scenario, options, workers):
    jobs = [(p, per, m, scenario, options) for per in periods for m in methods]
    if workers and workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_cell, jobs))
    else:
        results = [_cell(j) for j in jobs]
    return {(per.index, m): r for (_, per, m, _, _), r in zip(jobs, results)}


def _truth(p: PanelMatrix, period: PseudoPeriod) -> np.ndarray:
    return p.outcomes[: p.n_treated, period.start : period.stop]


def _record(report, p, period, method, cf, err, length=None):
    length = period.length if length is None else length
    row = {
        "method": method,
        "period": period.index,
        "start_date": period.start_date.isoformat(),
        "length": length,
        "mape": math.nan,
        "rmse": math.nan,
        "rmse_s": math.nan,
        "tpe": math.nan,
        "tape": math.nan,
        "n_zero_days": 0,
        "error": err,
    }
    if cf is not None:
        truth = _truth(p, period)[:, :length]
        pred = cf.values[:, :length]
        m = period_metrics(pred.sum(axis=0), truth.sum(axis=0), report.scale)
        row.update(mape=m.mape, rmse=m.rmse, rmse_s=m.rmse_s, tpe=m.tpe, tape=m.tape, n_zero_days=m.n_zero_days)
        if cf.scenario == "S2":
            for i, uid in enumerate(p.treated_ids):
                mape_i, _ = _mape(pred[i], truth[i])
                report.unit_rows.append({"method": method, "period": period.index, "unit_id": uid, "mape_od": mape_i})
    report.rows.append(row)


def run_backtest(
    p: PanelMatrix,
    periods: Sequence[PseudoPeriod],
    methods: Sequence[str],
    scenario: str = "S1",
    workers: int = 1,
    **options,
) -> MetricsReport:
    """Fit every method on the data before each period and score its predictions.

    Failures (precondition violations, singular systems) are recorded in the
    row's ``error`` column and the run continues.
    """
    methods = [_canonical(m) for m in methods]
    scenario = scenario.upper()
    report = MetricsReport(scenario, scaling_factor(p), list(periods))
    fits = _fit_grid(p, periods, methods, scenario, options, workers)
    for per in periods:
        for m in methods:
            cf, err = fits[(per.index, m)]
            _record(report, p, per, m, cf, err)
    return report


def length_sweep(
    p: PanelMatrix,
    period: PseudoPeriod,
    methods: Sequence[str],
    lengths: Sequence[int],
    scenario: str = "S1",
    workers: int = 1,
    **options,
) -> list[dict]:
    """tAPE of each method on prefixes of one period, from a single fit per method."""
    lengths = [int(n) for n in lengths]
    if not lengths or max(lengths) > period.length or min(lengths) < 1:
        raise ValueError(f"lengths must lie in 1..{period.length}")
    methods = [_canonical(m) for m in methods]
    report = MetricsReport(scenario.upper(), scaling_factor(p), [period])
    fits = _fit_grid(p, [period], methods, scenario.upper(), options, workers)
    out = []
    for m in methods:
        cf, err = fits[(period.index, m)]
        for n in lengths:
            _record(report, p, period, m, cf, err, n)
            r = report.rows[-1]
            out.append({"method": m, "length": n, "tape": r["tape"], "error": err})
    return out


# ---------------------------------------------------------------------------
# Output
# ---------------------------------------------------------------------------


def _fmt(v):
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return v


def _write_rows(rows: Sequence[dict], columns: Sequence[str], path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])


METRIC_COLUMNS = ["method", "period", "start_date", "length", "mape", "rmse", "rmse_s", "tpe", "tape", "n_zero_days", "error"]


def write_metrics(report: MetricsReport, path: str | Path) -> None:
    _write_rows(report.rows, METRIC_COLUMNS, path)


def write_unit_metrics(report: MetricsReport, path: str | Path) -> None:
    """Per (method, unit) MAPE^od averaged over periods (S2 only)."""
    grouped: dict[tuple[str, str], list[float]] = {}
    for r in report.unit_rows:
        grouped.setdefault((r["method"], r["unit_id"]), []).append(r["mape_od"])
    rows = [{"method": m, "unit_id": u, "mape_od": float(np.mean(v)), "n_periods": len(v)} for (m, u), v in grouped.items()]
    _write_rows(rows, ["method", "unit_id", "mape_od", "n_periods"], path)


def write_sweep(rows: Sequence[dict], path: str | Path) -> None:
    _write_rows(rows, ["method", "length", "tape", "error"], path)


def write_plot_data(rows: Sequence[dict], path: str | Path) -> None:
    """JSON series ``{method: {lengths, tape}}`` plus the reference thresholds."""
    series: dict[str, dict[str, list]] = {}
    for r in rows:
        s = series.setdefault(r["method"], {"length": [], "tape": []})
        s["length"].append(r["length"])
        s["tape"].append(None if math.isnan(r["tape"]) else r["tape"])
    Path(path).write_text(json.dumps({"series": series, "reference_thresholds": list(REFERENCE_THRESHOLDS)}, indent=2, sort_keys=True) + "\n")
