"""Simulated treatments with known impact, impact estimation and prediction intervals."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import linalg, stats

from ._validation import check_block
from .linear import CounterfactualSeries, LinearFit
from .panel import PanelError, PanelMatrix, TreatmentMask

__all__ = [
    "SimulatedTreatment",
    "ImpactReport",
    "ResidualDiagnostics",
    "inject_treatment",
    "estimate_impact",
    "cr_prediction_interval",
    "residual_diagnostics",
    "write_impact_table",
]


@dataclass
class SimulatedTreatment:
    """Multipliers applied to the treated cells and the impact they create."""

    mu: float
    sigma2: float
    seed: int | None
    multipliers: np.ndarray
    tau: float
    untreated_total: float

    @property
    def relative_impact(self) -> float:
        """Realized impact in percent of the untreated total."""
        return 100.0 * self.tau / self.untreated_total

    @property
    def expected_relative_impact(self) -> float:
        """Analytic ``E[eps] - 1`` in percent."""
        return 100.0 * math.expm1(self.mu + self.sigma2 / 2.0)


@dataclass
class ImpactReport:
    method: str
    tau_hat: float
    counterfactual_total: float
    observed_total: float
    lower: float | None = None
    upper: float | None = None

    @property
    def relative_impact(self) -> float:
        return 100.0 * self.tau_hat / self.counterfactual_total

    @property
    def width_pct(self) -> float | None:
        """Interval width as a percentage of the predicted counterfactual sum."""
        if self.lower is None:
            return None
        return 100.0 * (self.upper - self.lower) / self.counterfactual_total


def inject_treatment(
    p: PanelMatrix,
    mu: float,
    sigma2: float = 0.0005,
    seed: int | None = 0,
    mask: TreatmentMask | None = None,
) -> tuple[PanelMatrix, SimulatedTreatment]:
    """Multiply every treated cell by an independent ``Lognormal(mu, sigma2)`` draw.

    Only cells in the treatment mask (treated rows, columns from ``t0``) change.
    """
    if sigma2 < 0:
        raise ValueError("sigma2 must be nonnegative")
    mask = p.treatment_mask if mask is None else mask
    if (mask.n_units, mask.n_periods) != p.outcomes.shape:
        raise ValueError("mask does not match panel shape")
    nt, t0 = mask.n_treated, mask.t0
    if not p.observed[:nt, t0:].all():
        raise PanelError("treated cells in the treatment window must be observed")
    rng = np.random.default_rng(seed)
    eps = np.exp(mu + math.sqrt(sigma2) * rng.standard_normal((nt, mask.n_periods - t0)))
    y0 = p.outcomes[:nt, t0:]
    y = np.array(p.outcomes)
    y[:nt, t0:] = y0 * eps
    tau = float(np.sum(y[:nt, t0:] - y0))
    sim = SimulatedTreatment(float(mu), float(sigma2), seed, eps, tau, float(y0.sum()))
    return p.replace(outcomes=y), sim


def estimate_impact(observed, cf: CounterfactualSeries, interval: tuple[float, float] | None = None) -> ImpactReport:
    """Sum of observed minus predicted outcomes over the treatment window.

    ``observed`` is a panel (its treated post-treatment block is used) or an
    array of treated outcomes. An S1 counterfactual is compared with the
    daily sum of the observed treated rows. ``interval`` bounds the
    counterfactual sum and is converted to bounds on the impact.
    """
    if isinstance(observed, PanelMatrix):
        obs = observed.outcomes[: observed.n_treated, observed.t0 :]
    else:
        obs = check_block(observed, "observed")
    pred = cf.values
    if pred.shape[0] == 1 and obs.shape[0] > 1:
        obs = obs.sum(axis=0, keepdims=True)
    if obs.shape != pred.shape:
        raise ValueError(f"observed shape {obs.shape} does not match counterfactual {pred.shape}")
    cf_total = float(pred.sum())
    if cf_total == 0:
        raise ValueError("counterfactual sum is zero; relative impact undefined")
    obs_total = float(obs.sum())
    lower = upper = None
    if interval is not None:
        lower, upper = obs_total - float(interval[1]), obs_total - float(interval[0])
    return ImpactReport(cf.method, obs_total - cf_total, cf_total, obs_total, lower, upper)


def cr_prediction_interval(
    fit: LinearFit,
    pre_control,
    post_control,
    level: float = 0.99,
) -> tuple[float, float]:
    """Prediction interval for the treatment-window sum of an OLS counterfactual.

    Assumes iid normal residuals. With design rows ``x_t = (1, controls_t)``,
    ``v`` the sum of post-treatment design rows and ``s`` the residual
    standard error on ``T0 - N^c - 1`` degrees of freedom, the interval is
    ``v'theta +/- t_q * s * sqrt(T1 + v'(X'X)^-1 v)``.
    """
    if fit.method != "CR":
        raise ValueError("prediction intervals are defined for unpenalised CR fits only")
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    x_pre = check_block(pre_control, "pre_control")
    x_post = check_block(post_control, "post_control")
    nc, t0 = x_pre.shape
    if x_post.shape[0] != nc or fit.weights.size != nc or fit.residuals.size != t0:
        raise ValueError("fit, pre_control and post_control dimensions disagree")
    df = t0 - nc - 1
    if df <= 0:
        raise ValueError(f"need T0 > N^c + 1 for the interval (degrees of freedom {df})")
    design = np.column_stack([np.ones(t0), x_pre.T])
    gram = design.T @ design
    if np.linalg.matrix_rank(design) < design.shape[1]:
        raise np.linalg.LinAlgError("singular design matrix")
    t1 = x_post.shape[1]
    v = np.concatenate([[t1], x_post.sum(axis=1)])
    total = float(fit.predict(x_post).sum())
    s2 = float(fit.residuals @ fit.residuals) / df
    q = stats.t.ppf(1 - (1 - level) / 2, df)
    var_factor = t1 + float(v @ linalg.solve(gram, v, assume_a="pos"))
    half = float(q) * math.sqrt(s2 * var_factor)
    return total - half, total + half


@dataclass
class ResidualDiagnostics:
    n: int
    lag1_autocorrelation: float
    autocorrelation_threshold: float
    normality_pvalue: float
    normality_alpha: float

    @property
    def autocorrelation_ok(self) -> bool:
        return math.isfinite(self.lag1_autocorrelation) and abs(self.lag1_autocorrelation) <= self.autocorrelation_threshold

    @property
    def normality_ok(self) -> bool:
        return math.isfinite(self.normality_pvalue) and self.normality_pvalue >= self.normality_alpha

    @property
    def warnings(self) -> list[str]:
        out = []
        if not self.autocorrelation_ok:
            out.append("residuals are autocorrelated (or autocorrelation undefined)")
        if not self.normality_ok:
            out.append("residuals fail the normality check (or it is undefined)")
        return out


def residual_diagnostics(
    fit: LinearFit | np.ndarray,
    acf_threshold: float | None = None,
    normality_alpha: float = 0.01,
) -> ResidualDiagnostics:
    """Lag-1 autocorrelation and a Jarque-Bera normality test of the residuals.

    The autocorrelation check passes when ``|r1| <= acf_threshold``, by default
    ``3 / sqrt(n)``. Constant residuals make both statistics undefined and
    both checks warn.
    """
    r = np.asarray(fit.residuals if isinstance(fit, LinearFit) else fit, dtype=float)
    n = r.size
    if n < 3:
        raise ValueError("need at least 3 residuals")
    thr = 3.0 / math.sqrt(n) if acf_threshold is None else acf_threshold
    c = r - r.mean()
    denom = float(c @ c)
    if denom <= 1e-300 * max(1.0, float(r @ r)) or np.ptp(r) == 0:
        return ResidualDiagnostics(n, math.nan, thr, math.nan, normality_alpha)
    acf = float(c[1:] @ c[:-1]) / denom
    pvalue = float(stats.jarque_bera(r).pvalue)
    return ResidualDiagnostics(n, acf, thr, pvalue, normality_alpha)


IMPACT_COLUMNS = [
    "method",
    "mu",
    "sigma2",
    "true_tau",
    "true_relative_realized",
    "true_relative_expected",
    "tau_hat",
    "relative_impact",
    "lower",
    "upper",
    "width_pct",
]


def write_impact_table(rows: Sequence[tuple[ImpactReport, SimulatedTreatment]], path: str | Path) -> None:
    """One row per (method, mu) with ground truth next to the estimate."""

    def fmt(v):
        return "" if v is None else repr(float(v))

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(IMPACT_COLUMNS)
        for rep, sim in rows:
            w.writerow(
                [
                    rep.method,
                    fmt(sim.mu),
                    fmt(sim.sigma2),
                    fmt(sim.tau),
                    fmt(sim.relative_impact),
                    fmt(sim.expected_relative_impact),
                    fmt(rep.tau_hat),
                    fmt(rep.relative_impact),
                    fmt(rep.lower),
                    fmt(rep.upper),
                    fmt(rep.width_pct),
                ]
            )
