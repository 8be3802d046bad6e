"""Linear counterfactual family: treated outcome as an affine map of controls.

All estimators here fit ``y_t ~ mu + sum_j w_j x_jt`` on the pre-treatment
window and differ only in which constraints or penalties they impose:

* DID   -- equal weights summing to one, free intercept (closed form)
* SC    -- weights on the probability simplex, no intercept
* CR    -- unconstrained least squares with intercept
* CR-EN -- CR plus an elastic-net penalty on the weights

The functional API takes blocks in panel orientation (units x periods).
The estimator classes at the bottom use the scikit-learn orientation
(periods x units) so they can be dropped into pipelines.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
from scipy import linalg, optimize
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.exceptions import ConvergenceWarning
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from ._validation import ConvergenceError, check_block, check_grid, check_pre_blocks
from .panel import PanelError, PanelMatrix, block_views

__all__ = [
    "LinearFit",
    "CounterfactualSeries",
    "project_simplex",
    "fit_linear",
    "fit_did",
    "fit_sc",
    "fit_cr",
    "lambda_max",
    "default_enet_grid",
    "cv_elastic_net",
    "predict_linear",
    "predict_yoy",
    "DifferenceInDifferences",
    "SyntheticControl",
    "ConstrainedRegression",
    "ConstrainedRegressionCV",
]


@dataclass
class LinearFit:
    """Fitted intercept and control weights plus the in-sample residuals."""

    intercept: float
    weights: np.ndarray
    residuals: np.ndarray
    method: str
    hyperparameters: dict[str, Any] = field(default_factory=dict)

    def predict(self, control) -> np.ndarray:
        return self.intercept + self.weights @ np.asarray(control, dtype=float)

    def to_dict(self) -> dict:
        r = self.residuals
        return {
            "method": self.method,
            "intercept": float(self.intercept),
            "weights": [float(w) for w in self.weights],
            "hyperparameters": {k: _jsonable(v) for k, v in self.hyperparameters.items()},
            "residuals": [float(e) for e in r],
            "residual_summary": {
                "n": int(r.size),
                "mean": float(r.mean()) if r.size else 0.0,
                "std": float(r.std(ddof=0)) if r.size else 0.0,
                "rmse": float(np.sqrt(np.mean(r**2))) if r.size else 0.0,
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LinearFit":
        return cls(
            intercept=float(d["intercept"]),
            weights=np.asarray(d["weights"], dtype=float),
            residuals=np.asarray(d.get("residuals", []), dtype=float),
            method=d["method"],
            hyperparameters=dict(d.get("hyperparameters", {})),
        )


def _jsonable(v):
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    return v


@dataclass
class CounterfactualSeries:
    """Predicted untreated outcomes over the treatment window.

    ``values`` has one row per treated unit (S2) or a single row (S1).
    """

    values: np.ndarray
    scenario: str = "S2"
    method: str = ""

    def __post_init__(self):
        v = np.atleast_2d(np.asarray(self.values, dtype=float))
        if not np.all(np.isfinite(v)):
            raise ValueError(f"{self.method or 'counterfactual'} produced non-finite values")
        self.values = v

    @property
    def total(self) -> np.ndarray:
        """Daily total over treated units."""
        return self.values.sum(axis=0)


# ---------------------------------------------------------------------------
# Solvers
# ---------------------------------------------------------------------------


def project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto ``{w : w >= 0, sum(w) = 1}`` (sort-based)."""
    v = np.asarray(v, dtype=float)
    n = v.size
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    ind = np.arange(1, n + 1)
    rho = np.nonzero(u - css / ind > 0)[0][-1]
    theta = css[rho] / (rho + 1.0)
    return np.maximum(v - theta, 0.0)


def _simplex_lsq(
    y: np.ndarray,
    x: np.ndarray,
    tol: float = 1e-10,
    max_iter: int = 10_000,
    kkt_tol: float = 1e-9,
) -> np.ndarray:
    """Minimize ``||y - w @ x||^2`` over the simplex by projected gradient.

    Uses Nesterov momentum with function-value restarts and a backtracking
    step. The problem is rescaled so ``tol`` applies to an O(1) objective.
    """
    scale = max(np.abs(x).max(), np.abs(y).max(), 1e-300)
    xs, ys = x / scale, y / scale
    n = xs.shape[0]
    gram = xs @ xs.T
    xy = xs @ ys

    def f(w):
        # Residual form avoids cancellation near an exact fit.
        r = ys - w @ xs
        return float(r @ r)

    def grad(w):
        return 2 * (gram @ w - xy)

    # Start from the best vertex; exact-match problems then converge at once.
    vertex_obj = np.sum((ys[None, :] - xs) ** 2, axis=1)
    w = np.zeros(n)
    w[int(np.argmin(vertex_obj))] = 1.0
    fw = f(w)
    lip = 2 * max(np.linalg.eigvalsh(gram)[-1], 1e-300)
    step = 1.0 / lip
    z, t_mom, restarted = w.copy(), 1.0, True
    for _ in range(max_iter):
        fz, gz = f(z), grad(z)
        while True:
            w_new = project_simplex(z - step * gz)
            d = w_new - z
            if f(w_new) <= fz + gz @ d + (d @ d) / (2 * step) + 1e-15 * max(fz, 1.0):
                break
            step *= 0.5
        f_new = f(w_new)
        if f_new > fw and not restarted:
            # Momentum overshot: restart from the last iterate.
            z, t_mom, restarted = w.copy(), 1.0, True
            continue
        t_next = 0.5 * (1 + math.sqrt(1 + 4 * t_mom * t_mom))
        z = w_new + ((t_mom - 1) / t_next) * (w_new - w)
        t_mom, restarted = t_next, False
        change = abs(fw - f_new)
        kkt = np.max(np.abs(w_new - w))
        w, fw = w_new, f_new
        if change < tol:
            # KKT check: the projected-gradient map must leave w (almost) fixed.
            w_pg = project_simplex(w - grad(w) / lip)
            if np.max(np.abs(w_pg - w)) < kkt_tol:
                return _polish_simplex(w, xs, ys, f)
            if kkt < kkt_tol * 1e-3:
                z, t_mom, restarted = w.copy(), 1.0, True
    raise ConvergenceError(
        f"simplex least squares did not converge in {max_iter} iterations",
        objective=fw * scale**2,
    )


def _polish_simplex(w, xs, ys, f):
    """Re-solve exactly on the support of ``w``; keep it if feasible and no worse."""
    support = np.flatnonzero(w > 0)
    k = support.size
    xsub = xs[support]
    kkt = np.zeros((k + 1, k + 1))
    kkt[:k, :k] = 2 * xsub @ xsub.T
    kkt[:k, k] = 1.0
    kkt[k, :k] = 1.0
    rhs = np.concatenate([2 * xsub @ ys, [1.0]])
    try:
        # Ill-conditioned supports are fine: the candidate is only kept if it is no worse.
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", linalg.LinAlgWarning)
            sol = linalg.solve(kkt, rhs, assume_a="sym")
    except (linalg.LinAlgError, ValueError):
        return w
    if not np.all(np.isfinite(sol)) or np.any(sol[:k] < 0):
        return w
    cand = np.zeros_like(w)
    cand[support] = sol[:k]
    cand /= cand.sum()
    return cand if f(cand) <= f(w) else w


def _ols_with_intercept(y: np.ndarray, x: np.ndarray) -> tuple[float, np.ndarray]:
    t0 = y.size
    design = np.column_stack([np.ones(t0), x.T])
    rank = np.linalg.matrix_rank(design)
    if rank < design.shape[1]:
        raise np.linalg.LinAlgError(
            f"design matrix is rank deficient (rank {rank} < {design.shape[1]}); "
            "use a positive penalty (elastic net) or fewer controls"
        )
    coef, *_ = linalg.lstsq(design, y, lapack_driver="gelsd")
    return float(coef[0]), coef[1:]


def _soft_threshold(z: float, g: float) -> float:
    if z > g:
        return z - g
    if z < -g:
        return z + g
    return 0.0


def _enet_cd(
    gram: np.ndarray,
    xy: np.ndarray,
    penalty: float,
    l1_ratio: float,
    w0: np.ndarray | None = None,
    tol: float = 1e-8,
    max_iter: int = 100_000,
) -> tuple[np.ndarray, int, bool]:
    """Cyclic coordinate descent with covariance updates on centred data.

    Minimizes ``w'Gw - 2 w'b + penalty * ((1-a)/2 ||w||^2 + a ||w||_1)``.
    """
    n = gram.shape[0]
    w = np.zeros(n) if w0 is None else np.array(w0, dtype=float)
    diag = np.diag(gram).copy()
    l1 = penalty * l1_ratio
    l2 = penalty * (1.0 - l1_ratio)
    denom = 2 * diag + l2
    # Running gradient term G @ w, updated one column at a time.
    gw = gram @ w
    for it in range(1, max_iter + 1):
        max_delta = 0.0
        for j in range(n):
            if denom[j] <= 0.0:
                if w[j] != 0.0:
                    gw -= gram[:, j] * w[j]
                    w[j] = 0.0
                continue
            rho = xy[j] - gw[j] + diag[j] * w[j]
            new = _soft_threshold(2.0 * rho, l1) / denom[j]
            delta = new - w[j]
            if delta != 0.0:
                gw += gram[:, j] * delta
                w[j] = new
                max_delta = max(max_delta, abs(delta))
        if max_delta < tol:
            return w, it, True
    return w, max_iter, False


# ---------------------------------------------------------------------------
# Fitting
# ---------------------------------------------------------------------------


def fit_linear(
    pre_treated,
    pre_control,
    *,
    no_intercept: bool = False,
    adding_up: bool = False,
    nonnegative: bool = False,
    equal_weights: bool = False,
    method: str | None = None,
) -> LinearFit:
    """Least-squares fit of the treated series on controls under any constraint subset.

    The four flags correspond to: intercept fixed at zero, weights summing to
    one, nonnegative weights, and all weights equal.
    """
    y, x = check_pre_blocks(pre_treated, pre_control)
    nc, t0 = x.shape
    tag = method or "linear"

    if equal_weights:
        s = x.mean(axis=0)  # regressor: average control, weight = nc * w_bar
        if adding_up:
            w_bar = 1.0 / nc
            mu = 0.0 if no_intercept else float(np.mean(y - s))
        else:
            if no_intercept:
                ss = float(s @ s)
                beta = float(s @ y) / ss if ss > 0 else 0.0
                mu = 0.0
            else:
                sc = s - s.mean()
                ss = float(sc @ sc)
                beta = float(sc @ (y - y.mean())) / ss if ss > 0 else 0.0
                mu = float(y.mean() - beta * s.mean())
            if nonnegative and beta < 0:
                beta = 0.0
                mu = 0.0 if no_intercept else float(y.mean())
            w_bar = beta / nc
        w = np.full(nc, w_bar)
        return LinearFit(mu, w, y - mu - w @ x, tag)

    if no_intercept:
        yc, xc, ym, xm = y, x, 0.0, np.zeros(nc)
    else:
        ym, xm = y.mean(), x.mean(axis=1)
        yc, xc = y - ym, x - xm[:, None]

    if adding_up and nonnegative:
        w = _simplex_lsq(yc, xc)
    elif nonnegative:
        w, _ = optimize.nnls(xc.T, yc)
    elif adding_up:
        # Equality-constrained least squares via the KKT system.
        kkt = np.zeros((nc + 1, nc + 1))
        kkt[:nc, :nc] = 2 * xc @ xc.T
        kkt[:nc, nc] = 1.0
        kkt[nc, :nc] = 1.0
        rhs = np.concatenate([2 * xc @ yc, [1.0]])
        sol, *_ = linalg.lstsq(kkt, rhs)
        w = sol[:nc]
    else:
        if no_intercept:
            w, *_ = linalg.lstsq(xc.T, yc)
        else:
            mu, w = _ols_with_intercept(y, x)
            return LinearFit(mu, w, y - mu - w @ x, tag)
    mu = 0.0 if no_intercept else float(ym - xm @ w)
    return LinearFit(mu, w, y - mu - w @ x, tag)


def fit_did(pre_treated, pre_control) -> LinearFit:
    """Difference-in-differences: weights ``1/N^c`` and a level-shift intercept."""
    y, x = check_pre_blocks(pre_treated, pre_control)
    nc = x.shape[0]
    w = np.full(nc, 1.0 / nc)
    mu = float(y.mean() - x.mean())
    return LinearFit(mu, w, y - mu - w @ x, "DID")


def fit_sc(pre_treated, pre_control, tol: float = 1e-10, max_iter: int = 10_000) -> LinearFit:
    """Synthetic control: convex combination of controls with no intercept."""
    y, x = check_pre_blocks(pre_treated, pre_control)
    w = _simplex_lsq(y, x, tol=tol, max_iter=max_iter)
    return LinearFit(0.0, w, y - w @ x, "SC")


def fit_cr(
    pre_treated,
    pre_control,
    penalty: float = 0.0,
    l1_ratio: float = 0.0,
    warm_start: np.ndarray | None = None,
    tol: float = 1e-8,
    max_iter: int = 100_000,
) -> LinearFit:
    """Unconstrained regression with intercept, optionally elastic-net penalised.

    ``penalty`` is the overall strength and ``l1_ratio`` the lasso share; the
    penalty term is ``penalty * ((1 - l1_ratio)/2 ||w||^2 + l1_ratio ||w||_1)``
    added to the plain residual sum of squares. With ``penalty == 0`` this is
    ordinary least squares solved by an SVD-based factorization.
    """
    y, x = check_pre_blocks(pre_treated, pre_control)
    if penalty < 0:
        raise ValueError("penalty must be nonnegative")
    if not 0.0 <= l1_ratio <= 1.0:
        raise ValueError("l1_ratio must lie in [0, 1]")
    hp = {"penalty": float(penalty), "l1_ratio": float(l1_ratio)}
    if penalty == 0:
        mu, w = _ols_with_intercept(y, x)
        return LinearFit(mu, w, y - mu - w @ x, "CR", hp)

    ym, xm = y.mean(), x.mean(axis=1)
    yc, xc = y - ym, x - xm[:, None]
    w, n_iter, ok = _enet_cd(xc @ xc.T, xc @ yc, penalty, l1_ratio, warm_start, tol, max_iter)
    if not ok:
        warnings.warn(
            f"coordinate descent stopped after {n_iter} sweeps without converging",
            ConvergenceWarning,
            stacklevel=2,
        )
    mu = float(ym - xm @ w)
    hp["n_iter"] = n_iter
    return LinearFit(mu, w, y - mu - w @ x, "CR-EN", hp)


def lambda_max(pre_treated, pre_control) -> float:
    """Smallest lasso penalty (``l1_ratio=1``) that zeroes every weight."""
    y, x = check_pre_blocks(pre_treated, pre_control)
    xc = x - x.mean(axis=1, keepdims=True)
    return float(2 * np.max(np.abs(xc @ (y - y.mean()))))


def default_enet_grid(
    lam_max: float,
    l1_ratios: Sequence[float] = (0.0, 0.25, 0.5, 0.75, 1.0),
    n_lambdas: int = 20,
    ratio: float = 1e-4,
) -> list[tuple[float, float]]:
    """``(l1_ratio, penalty)`` pairs on a log grid from ``lam_max`` down to ``lam_max*ratio``."""
    lams = np.geomspace(lam_max, lam_max * ratio, n_lambdas)
    return [(float(a), float(lam)) for a in l1_ratios for lam in lams]


def cv_elastic_net(
    p: PanelMatrix | np.ndarray,
    grid: Sequence[tuple[float, float]] | None = None,
    valid_fraction: float = 0.2,
) -> tuple[float, float]:
    """Leave-one-control-out selection of ``(l1_ratio, penalty)``.

    Each control in turn plays the treated unit and is predicted from the
    remaining controls. Models are fit on the first ``1 - valid_fraction``
    of the pre-treatment window and scored by MSE on the rest. Returns the
    grid point with the lowest MSE averaged over held-out controls; ties go
    to the smaller penalty, then the smaller ``l1_ratio``.
    """
    if isinstance(p, PanelMatrix):
        if not p.observed[:, : p.t0].all():
            raise PanelError("elastic-net cross-validation needs fully observed pre-treatment data")
        controls = block_views(p)[1]
    else:
        controls = check_block(p, "controls")
    nc, t0 = controls.shape
    if nc < 3:
        raise ValueError("cross-validation needs at least 3 control units")
    if grid is None:
        lam = max(
            lambda_max(controls[j], np.delete(controls, j, axis=0)) for j in range(nc)
        )
        grid = default_enet_grid(lam if lam > 0 else 1.0)
    grid = [(float(a), float(lam)) for a, lam in check_grid(grid)]
    n_train = t0 - max(1, int(round(valid_fraction * t0)))
    if n_train < 2:
        raise ValueError("pre-treatment window too short for a train/validation split")

    scores = np.zeros(len(grid))
    # One warm-started path per (held-out unit, l1_ratio), penalties descending.
    by_ratio: dict[float, list[int]] = {}
    for k, (a, lam) in enumerate(grid):
        by_ratio.setdefault(a, []).append(k)
    for j in range(nc):
        y = controls[j]
        x = np.delete(controls, j, axis=0)
        ytr, xtr = y[:n_train], x[:, :n_train]
        yva, xva = y[n_train:], x[:, n_train:]
        for a, idx in by_ratio.items():
            warm = None
            for k in sorted(idx, key=lambda k: -grid[k][1]):
                lam = grid[k][1]
                try:
                    with warnings.catch_warnings():
                        warnings.simplefilter("ignore", ConvergenceWarning)
                        fit = fit_cr(ytr, xtr, penalty=lam, l1_ratio=a, warm_start=warm)
                except np.linalg.LinAlgError:
                    scores[k] = np.inf
                    continue
                if lam > 0:
                    warm = fit.weights
                scores[k] += np.mean((yva - fit.predict(xva)) ** 2) / nc
    order = sorted(range(len(grid)), key=lambda k: (scores[k], grid[k][1], grid[k][0]))
    best = order[0]
    return grid[best]


# ---------------------------------------------------------------------------
# Prediction
# ---------------------------------------------------------------------------


def predict_linear(fit: LinearFit, post_control, scenario: str = "S1") -> CounterfactualSeries:
    x = check_block(post_control, "post_control")
    if x.shape[0] != fit.weights.size:
        raise ValueError(
            f"fit has {fit.weights.size} weights but post_control has {x.shape[0]} rows"
        )
    return CounterfactualSeries(fit.predict(x)[None, :], scenario, fit.method)


def predict_yoy(p: PanelMatrix, lag: int = 365) -> CounterfactualSeries:
    """Year-over-year baseline: each treated outcome equals its value ``lag`` days earlier."""
    if p.t0 < lag:
        raise PanelError(
            f"year-over-year baseline needs {lag} days of history before the treatment "
            f"window, panel has {p.t0}"
        )
    src = slice(p.t0 - lag, p.n_periods - lag)
    if not p.observed[: p.n_treated, src].all():
        raise PanelError("year-over-year source window has missing treated entries")
    values = p.outcomes[: p.n_treated, src]
    return CounterfactualSeries(values, "S2" if p.n_treated > 1 else "S1", "YOY")


# ---------------------------------------------------------------------------
# scikit-learn estimators (X: periods x controls, y: treated series)
# ---------------------------------------------------------------------------


class _LinearCounterfactual(RegressorMixin, BaseEstimator):
    def _fit_blocks(self, y, x):  # pragma: no cover - abstract
        raise NotImplementedError

    def fit(self, X, y):
        X, y = check_X_y(X, y, y_numeric=True)
        self.fit_ = self._fit_blocks(y, X.T)
        self.coef_ = self.fit_.weights
        self.intercept_ = self.fit_.intercept
        self.residuals_ = self.fit_.residuals
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "fit_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(
                f"X has {X.shape[1]} features, expected {self.n_features_in_}"
            )
        return self.fit_.predict(X.T)


class DifferenceInDifferences(_LinearCounterfactual):
    """Equal-weight control average plus a pre-treatment level shift."""

    def _fit_blocks(self, y, x):
        return fit_did(y, x)


class SyntheticControl(_LinearCounterfactual):
    """Convex combination of controls, no intercept.

    Parameters
    ----------
    tol : float, default=1e-10
        Stop when the (rescaled) objective improves by less than this.
    max_iter : int, default=10000
    """

    def __init__(self, tol: float = 1e-10, max_iter: int = 10_000):
        self.tol = tol
        self.max_iter = max_iter

    def _fit_blocks(self, y, x):
        return fit_sc(y, x, tol=self.tol, max_iter=self.max_iter)


class ConstrainedRegression(_LinearCounterfactual):
    """Least squares on controls with intercept and optional elastic-net penalty.

    Parameters
    ----------
    penalty : float, default=0.0
        Overall regularization strength. Zero gives ordinary least squares.
    l1_ratio : float, default=0.0
        Share of the lasso term in the penalty.
    """

    def __init__(self, penalty: float = 0.0, l1_ratio: float = 0.0):
        self.penalty = penalty
        self.l1_ratio = l1_ratio

    def _fit_blocks(self, y, x):
        return fit_cr(y, x, penalty=self.penalty, l1_ratio=self.l1_ratio)


class ConstrainedRegressionCV(_LinearCounterfactual):
    """Elastic-net regression with penalties picked by leave-one-control-out CV.

    Attributes
    ----------
    l1_ratio_, penalty_ : float
        Selected hyper-parameters.
    """

    def __init__(self, grid=None, valid_fraction: float = 0.2):
        self.grid = grid
        self.valid_fraction = valid_fraction

    def _fit_blocks(self, y, x):
        self.l1_ratio_, self.penalty_ = cv_elastic_net(x, self.grid, self.valid_fraction)
        return fit_cr(y, x, penalty=self.penalty_, l1_ratio=self.l1_ratio_)
