"""Seeded synthetic revenue panels with a known low-rank latent matrix."""

from __future__ import annotations

import csv
import datetime as dt
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .controls import zero_fraction
from .panel import PanelMatrix, calendar_features

__all__ = ["GeneratorConfig", "PanelSummary", "generate", "describe", "write_ground_truth"]


@dataclass(frozen=True)
class GeneratorConfig:
    """Shape, structure and noise of a synthetic panel.

    The latent matrix is ``M = A @ F`` with nonnegative unit loadings ``A``
    (N x r) and positive time factors ``F`` (r x T), so ``rank(M) = r`` exactly.
    Each factor is ``base * exp(drift + weekly + annual)`` with its own phases.

    Parameters
    ----------
    n_treated, n_control, n_periods : int
    t0 : int or None
        Pre-treatment length; None leaves the last 181 days as treatment window.
    rank : int
    noise_scale : float
        Log-standard deviation of the multiplicative noise, or the standard
        deviation relative to the mean latent value for additive noise.
    noise : {"multiplicative", "additive"}
    weekly_amplitude, annual_amplitude : float
        Log-amplitudes of the seasonal terms.
    drift_scale : float
        Standard deviation of the per-factor random-walk drift over the panel.
    sparse_fraction : float
        Fraction of control units made sparse (zeroed on ``sparse_zero_rate``
        of days).
    treated_as_combination : bool
        Build treated latent rows as convex combinations of control rows.
    """

    n_treated: int = 5
    n_control: int = 50
    n_periods: int = 881
    t0: int | None = None
    rank: int = 3
    noise_scale: float = 0.05
    noise: str = "multiplicative"
    weekly_amplitude: float = 0.3
    annual_amplitude: float = 0.2
    drift_scale: float = 0.2
    sparse_fraction: float = 0.0
    sparse_zero_rate: float = 0.9
    treated_as_combination: bool = False
    base_revenue: float = 1000.0
    start_date: dt.date = dt.date(2017, 1, 1)
    seed: int = 0

    def __post_init__(self):
        n = self.n_treated + self.n_control
        if self.n_treated < 1 or self.n_control < 1:
            raise ValueError("need at least one treated and one control unit")
        if not 1 <= self.rank <= min(n, self.n_periods):
            raise ValueError("rank must lie in 1..min(N, T)")
        for name in ("noise_scale", "weekly_amplitude", "annual_amplitude", "drift_scale", "base_revenue"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.noise not in ("multiplicative", "additive"):
            raise ValueError("noise must be 'multiplicative' or 'additive'")
        if not 0.0 <= self.sparse_fraction <= 1.0 or not 0.0 <= self.sparse_zero_rate <= 1.0:
            raise ValueError("sparse fractions must lie in [0, 1]")
        if isinstance(self.start_date, str):
            object.__setattr__(self, "start_date", dt.date.fromisoformat(self.start_date))
        t0 = self.n_periods - 181 if self.t0 is None else self.t0
        if not 1 <= t0 < self.n_periods:
            raise ValueError("t0 must satisfy 1 <= t0 < n_periods")

    @property
    def pre_periods(self) -> int:
        return self.n_periods - 181 if self.t0 is None else self.t0


def _time_factors(cfg: GeneratorConfig, rng: np.random.Generator, dates) -> np.ndarray:
    r, t = cfg.rank, cfg.n_periods
    cal = calendar_features(dates)
    days = np.arange(t)
    steps = rng.normal(0.0, cfg.drift_scale / np.sqrt(t), (r, t))
    drift = np.cumsum(steps, axis=1)
    week_phase = rng.uniform(0, 2 * np.pi, (r, 1))
    year_phase = rng.uniform(0, 2 * np.pi, (r, 1))
    weekly = cfg.weekly_amplitude * np.cos(cal.dow_angle[None, :] + week_phase)
    annual = cfg.annual_amplitude * np.cos(2 * np.pi * days[None, :] / 365.2425 + year_phase)
    return cfg.base_revenue * np.exp(drift + weekly + annual)


def generate(cfg: GeneratorConfig) -> tuple[PanelMatrix, np.ndarray]:
    """Draw ``(panel, latent)``; treated rows come first."""
    rng = np.random.default_rng(cfg.seed)
    nt, nc, t = cfg.n_treated, cfg.n_control, cfg.n_periods
    dates = tuple(cfg.start_date + dt.timedelta(days=k) for k in range(t))
    factors = _time_factors(cfg, rng, dates)

    load_c = rng.dirichlet(np.ones(cfg.rank), nc) * rng.uniform(0.5, 2.0, (nc, 1))
    m_c = load_c @ factors
    if cfg.treated_as_combination:
        w = rng.dirichlet(np.ones(nc), nt)
        m_t = w @ m_c
    else:
        load_t = rng.dirichlet(np.ones(cfg.rank), nt) * rng.uniform(0.5, 2.0, (nt, 1))
        m_t = load_t @ factors
    latent = np.vstack([m_t, m_c])

    if cfg.noise_scale == 0:
        y = latent.copy()
    elif cfg.noise == "multiplicative":
        s = cfg.noise_scale
        y = latent * np.exp(rng.normal(-0.5 * s**2, s, latent.shape))
    else:
        y = np.maximum(latent + cfg.noise_scale * latent.mean() * rng.standard_normal(latent.shape), 0.0)

    n_sparse = int(round(cfg.sparse_fraction * nc))
    if n_sparse:
        rows = nt + rng.choice(nc, n_sparse, replace=False)
        zero = rng.random((n_sparse, t)) < cfg.sparse_zero_rate
        y[rows] = np.where(zero, 0.0, y[rows])

    width = len(str(nt + nc - 1))
    ids = [f"T{i:0{width}d}" for i in range(nt)] + [f"C{i:0{width}d}" for i in range(nc)]
    panel = PanelMatrix(y, tuple(ids), dates, nt, cfg.pre_periods)
    return panel, latent


@dataclass
class PanelSummary:
    unit_mean: np.ndarray
    zero_fraction: np.ndarray
    seasonality_strength: np.ndarray
    effective_rank: int
    singular_values: np.ndarray = field(repr=False)


def describe(p: PanelMatrix, energy: float = 0.99) -> PanelSummary:
    """Per-unit mean, zero fraction and weekly seasonality strength, plus effective rank.

    Seasonality strength is the share of a unit's variance explained by its
    day-of-week means (0 for constant units). The effective rank is the
    smallest ``k`` whose leading singular values hold ``energy`` of the
    squared Frobenius norm.
    """
    y = np.where(p.observed, p.outcomes, 0.0)
    dow = calendar_features(p.dates).dow
    strength = np.zeros(p.n_units)
    total = y.var(axis=1)
    fitted = np.zeros_like(y)
    for d in range(7):
        cols = dow == d
        if cols.any():
            fitted[:, cols] = y[:, cols].mean(axis=1, keepdims=True)
    explained = fitted.var(axis=1)
    np.divide(explained, total, out=strength, where=total > 0)
    s = np.linalg.svd(y, compute_uv=False)
    sq = s**2
    if sq.sum() == 0:
        rank = 0
    else:
        rank = int(np.searchsorted(np.cumsum(sq) / sq.sum(), energy - 1e-12) + 1)
    return PanelSummary(y.mean(axis=1), zero_fraction(p), strength, rank, s)


def write_ground_truth(p: PanelMatrix, latent: np.ndarray, path: str | Path) -> None:
    """Sidecar long-format CSV ``unit_id,date,latent``."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["unit_id", "date", "latent"])
        for i, u in enumerate(p.unit_ids):
            for t, d in enumerate(p.dates):
                w.writerow([u, d.isoformat(), repr(float(latent[i, t]))])
