"""Robust synthetic control: singular-value thresholding then ridge regression.

The control block (over *all* periods, pre and post) is de-noised by keeping
the singular components above a threshold, rescaled by the observed
fraction. The treated series is then ridge-regressed on the de-noised
pre-treatment controls, and the counterfactual is the same linear map applied
to the de-noised post-treatment controls.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import linalg
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

from ._validation import check_block, check_grid, check_mask, check_series
from .linear import CounterfactualSeries, LinearFit

__all__ = [
    "SvdDecomposition",
    "DenoisedControls",
    "svd",
    "denoise",
    "threshold_for_rank",
    "fit_rsc",
    "default_eta_grid",
    "default_t_min",
    "cv_eta",
    "cv_gamma",
    "predict_rsc",
    "RobustSyntheticControl",
]


@dataclass(frozen=True)
class SvdDecomposition:
    singular_values: np.ndarray
    left: np.ndarray
    right: np.ndarray

    def reconstruct(self, keep: np.ndarray | slice | None = None) -> np.ndarray:
        keep = slice(None) if keep is None else keep
        s = self.singular_values[keep]
        return (self.left[:, keep] * s) @ self.right[keep]


def svd(a: np.ndarray) -> SvdDecomposition:
    u, s, vt = linalg.svd(np.asarray(a, dtype=float), full_matrices=False)
    return SvdDecomposition(s, u, vt)


@dataclass(frozen=True)
class DenoisedControls:
    """De-noised control block ``M`` (N^c x T) with its threshold metadata."""

    matrix: np.ndarray
    retained_count: int
    observed_fraction: float
    threshold: float
    singular_values: np.ndarray

    def pre(self, t0: int) -> np.ndarray:
        return self.matrix[:, :t0]

    def post(self, t0: int) -> np.ndarray:
        return self.matrix[:, t0:]


def denoise(control_block, gamma: float = 0.0, mask=None) -> DenoisedControls:
    """Keep singular components with ``s_i >= gamma`` and divide by the observed fraction.

    Missing entries (``mask`` False) are zero-filled before the SVD.
    """
    y = np.asarray(control_block, dtype=float)
    if y.ndim != 2:
        raise ValueError("control_block must be 2-D")
    if gamma < 0:
        raise ValueError("gamma must be nonnegative")
    mask = check_mask(mask, y.shape)
    filled = np.where(mask, y, 0.0)
    if not np.all(np.isfinite(filled)):
        raise ValueError("control_block contains non-finite observed values")
    p_hat = float(mask.mean())
    if p_hat == 0:
        raise ValueError("control_block has no observed entries")
    dec = svd(filled)
    keep = dec.singular_values >= gamma
    if not keep.any():
        raise ValueError("threshold removes all signal")
    m = dec.reconstruct(keep) / p_hat
    return DenoisedControls(m, int(keep.sum()), p_hat, float(gamma), dec.singular_values)


def threshold_for_rank(singular_values: np.ndarray, k: int) -> float:
    """Threshold just below ``s_k`` so that the top ``k`` components survive."""
    s = np.asarray(singular_values)
    if not 1 <= k <= s.size:
        raise ValueError(f"rank {k} outside 1..{s.size}")
    return float(np.nextafter(s[k - 1], 0.0))


def fit_rsc(pre_treated, denoised: DenoisedControls | np.ndarray, eta: float) -> LinearFit:
    """Ridge regression (no intercept) of the treated series on de-noised controls.

    ``beta = (M M' + eta I)^-1 M y`` with ``M`` the de-noised pre-treatment block.
    """
    y = check_series(pre_treated, "pre_treated")
    t0 = y.size
    if isinstance(denoised, DenoisedControls):
        m = denoised.pre(t0)
        extra = {
            "gamma": denoised.threshold,
            "retained_rank": denoised.retained_count,
            "p_hat": denoised.observed_fraction,
        }
    else:
        m = check_block(denoised, "denoised")[:, :t0]
        extra = {}
    if m.shape[1] != t0:
        raise ValueError("de-noised block shorter than the treated series")
    if eta < 0:
        raise ValueError("eta must be nonnegative")
    a = m @ m.T + eta * np.eye(m.shape[0])
    if eta == 0 and np.linalg.matrix_rank(a) < a.shape[0]:
        raise np.linalg.LinAlgError(
            "normal equations are singular at eta = 0; use a positive ridge coefficient"
        )
    beta = linalg.solve(a, m @ y, assume_a="pos" if eta > 0 else "sym")
    return LinearFit(0.0, beta, y - beta @ m, "RSC", {"eta": float(eta), **extra})


def default_eta_grid(m_pre: np.ndarray, n: int = 13) -> list[float]:
    """Log grid scaled to the mean squared singular value of the pre block."""
    scale = float(np.sum(m_pre**2)) / max(m_pre.shape[0], 1)
    scale = scale if scale > 0 else 1.0
    return [float(v) for v in scale * np.geomspace(1e-8, 1e-2, n)]


def default_t_min(t0: int, min_points: int = 60, valid_fraction: float = 0.2) -> int:
    """First validation period (1-based) so the last 20% (at least 60 days) are scored."""
    n_valid = max(min_points, t0 - math.ceil((1 - valid_fraction) * t0) + 1)
    n_valid = min(n_valid, t0 - 1)
    return t0 - n_valid + 1


def _forward_chain_mse(y: np.ndarray, m_pre: np.ndarray, etas: Sequence[float], t_min: int):
    """Mean one-step-ahead squared error for each eta.

    For every validation period ``t`` (1-based, ``t_min..T0``) the ridge fit uses
    periods ``1..t-1``; the Gram matrix is accumulated column by column.
    """
    nc, t0 = m_pre.shape
    if not 2 <= t_min <= t0:
        raise ValueError(f"t_min must lie in 2..{t0}, got {t_min}")
    etas = np.asarray(etas, dtype=float)
    gram = m_pre[:, : t_min - 1] @ m_pre[:, : t_min - 1].T
    rhs = m_pre[:, : t_min - 1] @ y[: t_min - 1]
    sq = np.zeros(etas.size)
    for t in range(t_min, t0 + 1):
        col = m_pre[:, t - 1]
        # One eigendecomposition serves every eta: beta = V (L + eta)^-1 V' rhs.
        lam, vecs = linalg.eigh(gram)
        lam = np.maximum(lam, 0.0)
        proj_rhs = vecs.T @ rhs
        proj_col = vecs.T @ col
        denom = lam[None, :] + etas[:, None]
        cutoff = 1e-12 * max(lam[-1], 1e-300)
        inv = np.where(denom > cutoff, 1.0 / np.where(denom > cutoff, denom, 1.0), 0.0)
        pred = inv @ (proj_rhs * proj_col)
        sq += (y[t - 1] - pred) ** 2
        gram += np.outer(col, col)
        rhs += col * y[t - 1]
    return sq / (t0 - t_min + 1)


def _argmin_tiebreak(scores: np.ndarray, rtol: float = 1e-9, atol: float = 0.0) -> int:
    """Index of the first score within tolerance of the minimum (grid sorted ascending).

    ``atol`` absorbs round-off when the best scores are numerically zero.
    """
    best = np.min(scores)
    close = np.flatnonzero(scores <= best + rtol * abs(best) + atol + 1e-300)
    return int(close[0])


def _roundoff(y: np.ndarray) -> float:
    # Squared errors below this are indistinguishable from exact fits.
    return 1e-20 * float(np.mean(y**2))


def cv_eta(pre_treated, denoised, grid: Sequence[float] | None = None, t_min: int | None = None) -> float:
    """Forward-chaining selection of the ridge coefficient; ties go to the smaller eta."""
    y = check_series(pre_treated, "pre_treated")
    t0 = y.size
    m = denoised.pre(t0) if isinstance(denoised, DenoisedControls) else np.asarray(denoised)[:, :t0]
    grid = sorted(float(e) for e in (check_grid(grid, "eta grid") if grid is not None else default_eta_grid(m)))
    t_min = default_t_min(t0) if t_min is None else t_min
    scores = _forward_chain_mse(y, m, grid, t_min)
    return grid[_argmin_tiebreak(scores, atol=_roundoff(y))]


def cv_gamma(
    control_block,
    pre_treated,
    ranks: Sequence[int] | None = None,
    eta_grid: Sequence[float] | None = None,
    t_min: int | None = None,
    mask=None,
) -> tuple[float, float, int]:
    """Joint selection of the threshold (as a retained rank) and the ridge coefficient.

    Each candidate rank ``k`` sets the threshold just below ``s_k`` and is scored
    by the best forward-chaining MSE over ``eta_grid``. Returns
    ``(gamma, eta, k)``; ties go to the smallest rank.
    """
    y = check_series(pre_treated, "pre_treated")
    x = np.asarray(control_block, dtype=float)
    mask = check_mask(mask, x.shape)
    t0 = y.size
    filled = np.where(mask, x, 0.0)
    s = svd(filled).singular_values
    max_rank = min(x.shape[0], t0)
    ranks = sorted(check_grid(ranks if ranks is not None else range(1, max_rank + 1), "rank grid"))
    t_min = default_t_min(t0) if t_min is None else t_min

    results = []
    for k in ranks:
        gamma = threshold_for_rank(s, k)
        den = denoise(x, gamma, mask)
        m = den.pre(t0)
        etas = sorted(eta_grid) if eta_grid is not None else default_eta_grid(m)
        scores = _forward_chain_mse(y, m, etas, t_min)
        j = _argmin_tiebreak(scores, atol=_roundoff(y))
        results.append((scores[j], gamma, etas[j], k))
    best = _argmin_tiebreak(np.array([r[0] for r in results]), atol=_roundoff(y))
    _, gamma, eta, k = results[best]
    return gamma, eta, k


def predict_rsc(fit: LinearFit, denoised: DenoisedControls, t0: int, scenario: str = "S1") -> CounterfactualSeries:
    """Counterfactual from the de-noised post-treatment controls."""
    return CounterfactualSeries(fit.predict(denoised.post(t0))[None, :], scenario, "RSC")


class RobustSyntheticControl(RegressorMixin, BaseEstimator):
    """Robust synthetic control with cross-validated threshold and ridge coefficient.

    ``fit(X, y)`` takes the full control block ``X`` (T periods x N^c controls,
    NaN for missing) and the treated series ``y`` over the first ``len(y)``
    periods. Remaining rows of ``X`` are the treatment window.

    Parameters
    ----------
    n_components : int or None, default=None
        Retained rank. None selects it by forward-chaining CV.
    eta : float or None, default=None
        Ridge coefficient. None selects it by forward-chaining CV.
    t_min : int or None, default=None
        First validation period; None validates on the final 20% of the
        pre-treatment window (at least 60 periods).
    """

    def __init__(self, n_components=None, eta=None, t_min=None):
        self.n_components = n_components
        self.eta = eta
        self.t_min = t_min

    def fit(self, X, y):
        X = check_array(X, ensure_all_finite="allow-nan")
        y = check_series(y)
        if y.size > X.shape[0]:
            raise ValueError("y is longer than X")
        mask = ~np.isnan(X).T
        block = np.nan_to_num(X.T)
        s = svd(np.where(mask, block, 0.0)).singular_values
        if self.n_components is None:
            eta_grid = None if self.eta is None else [self.eta]
            gamma, eta, k = cv_gamma(block, y, eta_grid=eta_grid, t_min=self.t_min, mask=mask)
        else:
            k = int(self.n_components)
            gamma = threshold_for_rank(s, k)
            eta = self.eta
        self.denoised_ = denoise(block, gamma, mask)
        if eta is None:
            eta = cv_eta(y, self.denoised_, t_min=self.t_min)
        self.t0_ = y.size
        self.fit_ = fit_rsc(y, self.denoised_, eta)
        self.coef_ = self.fit_.weights
        self.n_components_ = self.denoised_.retained_count
        self.gamma_, self.eta_ = gamma, eta
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X=None):
        """Counterfactual over the de-noised treatment window.

        With ``X=None`` returns predictions for the rows of the fitted ``X``
        after ``len(y)``. Passing ``X`` applies the weights to raw controls.
        """
        check_is_fitted(self, "fit_")
        if X is None:
            return self.fit_.predict(self.denoised_.post(self.t0_))
        X = check_array(X)
        return self.fit_.predict(X.T)
