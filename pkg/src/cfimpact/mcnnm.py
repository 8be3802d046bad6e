"""Matrix completion with nuclear-norm regularization (SOFT-IMPUTE).

The latent matrix ``L`` minimizes

    (1/|O|) ||P_O(Y - L)||_F^2 + lam ||L||_*

where ``O`` is the set of observed cells. Treated cells in the treatment
window are simply unobserved, and the counterfactual is ``L`` on those cells.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import linalg
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import ConvergenceWarning
from sklearn.utils.validation import check_array, check_is_fitted

from ._validation import check_grid, check_mask
from .linear import CounterfactualSeries
from .panel import TreatmentMask

__all__ = [
    "LatentMatrix",
    "LambdaCV",
    "shrink",
    "mcnnm_objective",
    "soft_impute",
    "default_lambda_grid",
    "cross_validate_lambda",
    "cv_lambda",
    "predict_mcnnm",
    "SoftImpute",
]


@dataclass
class LatentMatrix:
    """Estimated low-rank matrix with its fit diagnostics."""

    matrix: np.ndarray
    lam: float
    n_iter: int
    objective: list[float] = field(default_factory=list)
    converged: bool = True

    @property
    def rank(self) -> int:
        s = linalg.svdvals(self.matrix)
        if s.size == 0 or s[0] == 0:
            return 0
        return int(np.sum(s > s[0] * max(self.matrix.shape) * np.finfo(float).eps))

    def to_dict(self) -> dict:
        return {
            "lambda": float(self.lam),
            "rank": self.rank,
            "iterations": int(self.n_iter),
            "converged": bool(self.converged),
            "objective_trace": [float(v) for v in self.objective],
        }


def shrink(a, lam: float) -> np.ndarray:
    """Soft-threshold the singular values of ``a`` by ``lam``."""
    if lam < 0:
        raise ValueError("lam must be nonnegative")
    a = np.asarray(a, dtype=float)
    if lam == 0:
        return a.copy()
    u, s, vt = linalg.svd(a, full_matrices=False)
    s = np.maximum(s - lam, 0.0)
    keep = s > 0
    return (u[:, keep] * s[keep]) @ vt[keep]


def mcnnm_objective(y, l, mask, lam: float) -> float:
    resid = np.where(mask, y - l, 0.0)
    n_obs = mask.sum()
    return float(np.sum(resid**2) / n_obs + lam * np.sum(linalg.svdvals(l)))


def soft_impute(
    y,
    mask=None,
    lam: float = 0.0,
    init: LatentMatrix | np.ndarray | None = None,
    tol: float = 1e-7,
    max_iter: int = 500,
) -> LatentMatrix:
    """Run SOFT-IMPUTE from ``init`` (default: observed entries, zeros elsewhere).

    Stops when the relative Frobenius change between iterates drops below
    ``tol`` or after ``max_iter`` iterations; in the latter case the result is
    returned with ``converged=False`` and a warning.
    """
    y = np.asarray(y, dtype=float)
    mask = check_mask(mask, y.shape)
    if lam < 0:
        raise ValueError("lam must be nonnegative")
    n_obs = int(mask.sum())
    if n_obs == 0:
        raise ValueError("no observed entries")
    p_y = np.where(mask, y, 0.0)
    if not np.all(np.isfinite(p_y)):
        raise ValueError("observed entries must be finite")
    if init is None:
        l = p_y.copy()
    else:
        l = np.array(init.matrix if isinstance(init, LatentMatrix) else init, dtype=float)
        if l.shape != y.shape:
            raise ValueError("init shape does not match data")
    threshold = lam * n_obs / 2.0
    trace = [mcnnm_objective(y, l, mask, lam)]
    converged = False
    k = 0
    for k in range(1, max_iter + 1):
        l_new = shrink(np.where(mask, p_y, l), threshold)
        trace.append(mcnnm_objective(y, l_new, mask, lam))
        step = np.linalg.norm(l_new - l)
        base = np.linalg.norm(l)
        change = step / base if base > 0 else (0.0 if step == 0 else np.inf)
        l = l_new
        if change < tol or not np.any(l):
            converged = True
            break
    if not converged:
        warnings.warn(
            f"SOFT-IMPUTE did not converge in {max_iter} iterations (lambda={lam:g})",
            ConvergenceWarning,
            stacklevel=2,
        )
    return LatentMatrix(l, float(lam), k, trace, converged)


def default_lambda_grid(y, mask=None, n: int = 15, ratio: float = 1e-4) -> list[float]:
    """Descending log grid starting at the smallest penalty that zeroes ``L`` in one step."""
    y = np.asarray(y, dtype=float)
    mask = check_mask(mask, y.shape)
    s1 = linalg.svdvals(np.where(mask, y, 0.0))[0]
    lam0 = 2.0 * s1 / mask.sum()
    return [float(v) for v in np.geomspace(lam0, lam0 * ratio, n)]


@dataclass
class LambdaCV:
    best: float
    grid: list[float]
    scores: np.ndarray
    n_iterations: int


def _fold_masks(mask: np.ndarray, n_folds: int, seed) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    obs = np.flatnonzero(mask.ravel())
    # Folds keep the observed proportion; a fully observed matrix would leave
    # nothing to validate on, so at least 1/n_folds of the cells are held out.
    frac = min(obs.size / mask.size, 1.0 - 1.0 / n_folds)
    n_keep = int(round(frac * obs.size))
    if n_keep < 1 or n_keep >= obs.size:
        raise ValueError("observed set too small to split into cross-validation folds")
    folds = []
    for _ in range(n_folds):
        keep = rng.choice(obs, size=n_keep, replace=False)
        m = np.zeros(mask.size, dtype=bool)
        m[keep] = True
        folds.append(m.reshape(mask.shape))
    return folds


def cross_validate_lambda(
    y,
    mask=None,
    n_folds: int = 5,
    grid: Sequence[float] | None = None,
    seed=0,
    warm_start: bool = True,
    tol: float = 1e-7,
    max_iter: int = 500,
) -> LambdaCV:
    """K-fold selection of ``lam``.

    Each fold keeps a random subset of the observed cells with the same
    observed proportion as the full matrix, fits along the descending grid
    (warm-started from the previous solution) and scores MSE on the held-out
    observed cells.
    """
    y = np.asarray(y, dtype=float)
    mask = check_mask(mask, y.shape)
    if n_folds < 2:
        raise ValueError("need at least 2 folds")
    grid = check_grid(grid if grid is not None else default_lambda_grid(y, mask), "lambda grid")
    if any(a < b for a, b in zip(grid, grid[1:])):
        raise ValueError("lambda grid must be sorted in descending order")
    scores = np.zeros(len(grid))
    total_iter = 0
    for fold in _fold_masks(mask, n_folds, seed):
        held = mask & ~fold
        prev = None
        for j, lam in enumerate(grid):
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", ConvergenceWarning)
                fit = soft_impute(y, fold, lam, init=prev if warm_start else None, tol=tol, max_iter=max_iter)
            total_iter += fit.n_iter
            prev = fit
            scores[j] += np.mean((y[held] - fit.matrix[held]) ** 2) / n_folds
    best = int(np.argmin(scores))
    return LambdaCV(float(grid[best]), list(grid), scores, total_iter)


def cv_lambda(y, mask=None, n_folds: int = 5, grid=None, seed=0, warm_start: bool = True, **kw) -> float:
    """Selected ``lam`` only; see :func:`cross_validate_lambda`."""
    return cross_validate_lambda(y, mask, n_folds, grid, seed, warm_start, **kw).best


def predict_mcnnm(latent: LatentMatrix, mask: TreatmentMask, scenario: str = "S2") -> CounterfactualSeries:
    l = latent.matrix
    if l.shape != (mask.n_units, mask.n_periods):
        raise ValueError(f"latent shape {l.shape} does not match panel {(mask.n_units, mask.n_periods)}")
    return CounterfactualSeries(l[: mask.n_treated, mask.t0 :], scenario, "MCNNM")


class SoftImpute(TransformerMixin, BaseEstimator):
    """Nuclear-norm matrix completion; NaN marks unobserved cells.

    Parameters
    ----------
    lam : float or None, default=None
        Penalty; None picks it by K-fold cross-validation.
    n_folds : int, default=5
    random_state : int, default=0
        Seed for the fold masks.
    tol, max_iter
        SOFT-IMPUTE stopping rule.
    """

    def __init__(self, lam=None, n_folds: int = 5, random_state=0, tol: float = 1e-7, max_iter: int = 500):
        self.lam = lam
        self.n_folds = n_folds
        self.random_state = random_state
        self.tol = tol
        self.max_iter = max_iter

    def fit(self, X, y=None):
        X = check_array(X, ensure_all_finite="allow-nan")
        mask = ~np.isnan(X)
        data = np.nan_to_num(X)
        lam = self.lam
        if lam is None:
            lam = cv_lambda(data, mask, self.n_folds, seed=self.random_state)
        self.latent_ = soft_impute(data, mask, lam, tol=self.tol, max_iter=self.max_iter)
        self.lam_ = lam
        self.shape_ = X.shape
        return self

    def transform(self, X):
        """Fill NaN cells of ``X`` from the fitted latent matrix."""
        check_is_fitted(self, "latent_")
        X = check_array(X, ensure_all_finite="allow-nan")
        if X.shape != self.shape_:
            raise ValueError("transform expects a matrix of the fitted shape")
        return np.where(np.isnan(X), self.latent_.matrix, X)
