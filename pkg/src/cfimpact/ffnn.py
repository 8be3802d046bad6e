"""Feed-forward network counterfactuals with an ensemble of searched configurations.

Architecture: two input branches, each followed by one fully connected layer
(calendar encodings -> ``context_size`` units, lagged control outcomes ->
``hidden_size`` units), concatenated into ``hidden_layers`` fully connected
layers of ``hidden_size`` units and a linear output with one unit per treated
series. Hidden activations are ReLU; dropout follows every hidden layer.

Training is plain mini-batch SGD on the mean squared error with homothety
augmentation (each sample's lagged inputs and targets are scaled by
``u ~ U(1/a, a)``) and early stopping on a chronologically later validation
window. Gradients are computed by hand so they can be checked against finite
differences.
"""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .linear import CounterfactualSeries
from .panel import PanelError, PanelMatrix, calendar_features

__all__ = [
    "FfnnConfig",
    "FfnnDataset",
    "FfnnModel",
    "TrainResult",
    "Trial",
    "EnsembleModel",
    "TrainingDivergedError",
    "DEFAULT_SEARCH_SPACE",
    "build_features",
    "chronological_split",
    "init_model",
    "train",
    "train_fixed",
    "sample_config",
    "hyperparameter_search",
    "finalize_and_predict",
    "write_search_results",
    "FeedForwardCounterfactual",
]

logger = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    """Training loss became non-finite."""


@dataclass(frozen=True)
class FfnnConfig:
    """Architecture and training hyper-parameters.

    ``epochs`` is the early-stopping budget during search and the exact
    number of epochs when retraining a selected configuration.
    """

    hidden_size: int = 64
    hidden_layers: int = 2
    context_size: int = 8
    batch_size: int = 32
    dropout: float = 0.0
    learning_rate: float = 1e-2
    lags: int = 0
    epochs: int = 500
    homothety: float = 1.0
    seed: int = 0
    momentum: float = 0.0
    patience: int = 20
    activation: str = "relu"
    include_month: bool = False

    def __post_init__(self):
        for name in ("hidden_size", "context_size", "batch_size", "epochs", "patience"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.hidden_layers < 0 or self.lags < 0:
            raise ValueError("hidden_layers and lags must be nonnegative")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.homothety < 1.0:
            raise ValueError("homothety coefficient must be >= 1")
        if self.activation not in ("relu", "identity"):
            raise ValueError("activation must be 'relu' or 'identity'")


@dataclass
class FfnnDataset:
    """Supervised samples: calendar inputs, lagged control inputs, targets."""

    calendar: np.ndarray
    lagged: np.ndarray
    target: np.ndarray | None
    days: np.ndarray

    def __len__(self) -> int:
        return self.lagged.shape[0]

    def subset(self, idx) -> "FfnnDataset":
        return FfnnDataset(
            self.calendar[idx],
            self.lagged[idx],
            None if self.target is None else self.target[idx],
            self.days[idx],
        )

    @staticmethod
    def concat(a: "FfnnDataset", b: "FfnnDataset") -> "FfnnDataset":
        return FfnnDataset(
            np.vstack([a.calendar, b.calendar]),
            np.vstack([a.lagged, b.lagged]),
            np.vstack([a.target, b.target]),
            np.concatenate([a.days, b.days]),
        )


def _lag_matrix(controls_t: np.ndarray, days: np.ndarray, lags: int) -> np.ndarray:
    # controls_t is (T, N^c); row for day t is [C[t], C[t-1], ..., C[t-lags]].
    return np.hstack([controls_t[days - j] for j in range(lags + 1)])


def build_features(p: PanelMatrix, lags: int, include_month: bool = False):
    """Turn a panel into pre-treatment training samples and treatment-window inputs.

    Returns ``(pre, post, n_dropped)``. Pre-treatment days whose lag window
    (or target) touches a missing entry are dropped and counted; the first
    ``lags`` days have no full history and are never samples.
    """
    if lags < 0:
        raise ValueError("lags must be nonnegative")
    cal = calendar_features(p.dates).encoded(include_month)
    ctrl = p.outcomes[p.n_treated :].T
    ctrl_obs = p.observed[p.n_treated :].T
    tgt = p.outcomes[: p.n_treated].T
    tgt_obs = p.observed[: p.n_treated].T

    def window_ok(days):
        ok = np.ones(days.size, dtype=bool)
        for j in range(lags + 1):
            ok &= ctrl_obs[days - j].all(axis=1)
        return ok

    pre_days = np.arange(lags, p.t0)
    if pre_days.size == 0:
        raise PanelError(f"no pre-treatment samples with {lags} lags")
    ok = window_ok(pre_days) & tgt_obs[pre_days].all(axis=1)
    n_dropped = int((~ok).sum())
    pre_days = pre_days[ok]
    pre = FfnnDataset(cal[pre_days], _lag_matrix(ctrl, pre_days, lags), tgt[pre_days], pre_days)

    post_days = np.arange(p.t0, p.n_periods)
    if not window_ok(post_days).all():
        raise PanelError("treatment-window inputs have missing control entries")
    post = FfnnDataset(cal[post_days], _lag_matrix(ctrl, post_days, lags), tgt[post_days], post_days)
    return pre, post, n_dropped


def chronological_split(data: FfnnDataset, valid_fraction: float = 0.2):
    n = len(data)
    n_valid = max(1, int(round(valid_fraction * n)))
    if n - n_valid < 1:
        raise ValueError("not enough samples for a train/validation split")
    return data.subset(slice(0, n - n_valid)), data.subset(slice(n - n_valid, n))


# ---------------------------------------------------------------------------
# Network
# ---------------------------------------------------------------------------


@dataclass
class FfnnModel:
    """Parameters, configuration and frozen normalization statistics."""

    config: FfnnConfig
    params: dict[str, np.ndarray]
    lag_mean: np.ndarray
    lag_scale: np.ndarray
    target_mean: np.ndarray
    target_scale: np.ndarray
    n_outputs: int = field(init=False)

    def __post_init__(self):
        self.n_outputs = self.params["out.W"].shape[1]

    @property
    def layer_names(self) -> list[str]:
        return ["ctx", "lag"] + [f"trunk{i}" for i in range(self.config.hidden_layers)] + ["out"]

    def _act(self, a):
        return np.maximum(a, 0.0) if self.config.activation == "relu" else a

    def _act_grad(self, a):
        return (a > 0).astype(float) if self.config.activation == "relu" else np.ones_like(a)

    def forward(self, cal, lag_n, rng=None, masks=None):
        """Forward pass on normalized inputs.

        Dropout is applied when ``rng`` is given (training) or explicit
        ``masks`` are passed; otherwise the pass is deterministic.
        """
        p, rate = self.params, self.config.dropout
        cache = {"masks": {}}

        def dense(name, x):
            a = x @ p[f"{name}.W"] + p[f"{name}.b"]
            h = self._act(a)
            m = None
            if masks is not None:
                m = masks.get(name)
            elif rng is not None and rate > 0:
                m = (rng.random(h.shape) >= rate) / (1.0 - rate)
            if m is not None:
                h = h * m
                cache["masks"][name] = m
            cache[name] = (x, a)
            return h

        h = np.hstack([dense("ctx", cal), dense("lag", lag_n)])
        for i in range(self.config.hidden_layers):
            h = dense(f"trunk{i}", h)
        cache["out"] = (h, None)
        return h @ p["out.W"] + p["out.b"], cache

    def loss_and_grads(self, cal, lag_n, y_n, rng=None, masks=None):
        """Mean squared error over samples and outputs, with parameter gradients."""
        out, cache = self.forward(cal, lag_n, rng, masks)
        diff = out - y_n
        loss = float(np.mean(diff**2))
        p = self.params
        grads = {}
        g = 2.0 * diff / diff.size
        h_in = cache["out"][0]
        grads["out.W"] = h_in.T @ g
        grads["out.b"] = g.sum(axis=0)
        g = g @ p["out.W"].T

        def back(name, g):
            x, a = cache[name]
            m = cache["masks"].get(name)
            if m is not None:
                g = g * m
            g = g * self._act_grad(a)
            grads[f"{name}.W"] = x.T @ g
            grads[f"{name}.b"] = g.sum(axis=0)
            return g @ p[f"{name}.W"].T

        for i in reversed(range(self.config.hidden_layers)):
            g = back(f"trunk{i}", g)
        n_ctx = p["ctx.W"].shape[1]
        back("ctx", g[:, :n_ctx])
        back("lag", g[:, n_ctx:])
        return loss, grads

    def normalize(self, lagged, target=None):
        lag_n = (lagged - self.lag_mean) / self.lag_scale
        if target is None:
            return lag_n, None
        return lag_n, (target - self.target_mean) / self.target_scale

    def predict(self, data: FfnnDataset) -> np.ndarray:
        """Raw-scale predictions, shape ``(n_samples, n_outputs)``."""
        lag_n, _ = self.normalize(data.lagged)
        out, _ = self.forward(data.calendar, lag_n)
        return out * self.target_scale + self.target_mean

    def to_dict(self) -> dict:
        return {
            "config": asdict(self.config),
            "layers": {k: list(v.shape) for k, v in self.params.items()},
            "params": {k: v.tolist() for k, v in self.params.items()},
            "normalization": {
                "lag_mean": self.lag_mean.tolist(),
                "lag_scale": self.lag_scale.tolist(),
                "target_mean": self.target_mean.tolist(),
                "target_scale": self.target_scale.tolist(),
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FfnnModel":
        norm = d["normalization"]
        return cls(
            FfnnConfig(**d["config"]),
            {k: np.asarray(v, dtype=float).reshape(d["layers"][k]) for k, v in d["params"].items()},
            np.asarray(norm["lag_mean"]),
            np.asarray(norm["lag_scale"]),
            np.asarray(norm["target_mean"]),
            np.asarray(norm["target_scale"]),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path: str | Path) -> "FfnnModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _scale(a: np.ndarray) -> np.ndarray:
    s = a.std(axis=0)
    return np.where(s > 0, s, 1.0)


def init_model(config: FfnnConfig, n_calendar: int, n_lagged: int, n_outputs: int, data: FfnnDataset | None = None) -> FfnnModel:
    """Seeded uniform initialization scaled by fan-in; normalization from ``data``."""
    rng = np.random.default_rng(config.seed)
    shapes = [("ctx", n_calendar, config.context_size), ("lag", n_lagged, config.hidden_size)]
    width = config.context_size + config.hidden_size
    for i in range(config.hidden_layers):
        shapes.append((f"trunk{i}", width, config.hidden_size))
        width = config.hidden_size
    shapes.append(("out", width, n_outputs))
    params = {}
    for name, fan_in, fan_out in shapes:
        bound = 1.0 / math.sqrt(fan_in)
        params[f"{name}.W"] = rng.uniform(-bound, bound, (fan_in, fan_out))
        params[f"{name}.b"] = rng.uniform(-bound, bound, fan_out)
    if data is None:
        stats = (np.zeros(n_lagged), np.ones(n_lagged), np.zeros(n_outputs), np.ones(n_outputs))
    else:
        stats = (data.lagged.mean(axis=0), _scale(data.lagged), data.target.mean(axis=0), _scale(data.target))
    return FfnnModel(config, params, *stats)


def homothety_factors(rng: np.random.Generator, n: int, a: float) -> np.ndarray:
    """Per-sample factors ``u ~ U(1/a, a)``; all ones when ``a == 1``."""
    if a == 1.0:
        return np.ones(n)
    return rng.uniform(1.0 / a, a, n)


def _run_epoch(model: FfnnModel, data: FfnnDataset, rng, velocity):
    cfg = model.config
    n = len(data)
    order = rng.permutation(n)
    total = 0.0
    for start in range(0, n, cfg.batch_size):
        idx = order[start : start + cfg.batch_size]
        u = homothety_factors(rng, idx.size, cfg.homothety)[:, None]
        lag_n, y_n = model.normalize(data.lagged[idx] * u, data.target[idx] * u)
        with np.errstate(over="ignore", invalid="ignore"):
            loss, grads = model.loss_and_grads(data.calendar[idx], lag_n, y_n, rng=rng)
        if not math.isfinite(loss):
            raise TrainingDivergedError(f"training diverged (non-finite loss) for config {cfg}")
        for k, g in grads.items():
            if cfg.momentum:
                velocity[k] = cfg.momentum * velocity[k] - cfg.learning_rate * g
                model.params[k] += velocity[k]
            else:
                model.params[k] -= cfg.learning_rate * g
        total += loss * idx.size
    return total / n


def _mse(model: FfnnModel, data: FfnnDataset) -> float:
    return float(np.mean((model.predict(data) - data.target) ** 2))


@dataclass
class TrainResult:
    model: FfnnModel
    best_epoch: int
    valid_mse: float
    history: list[float]


def train(config: FfnnConfig, train_set: FfnnDataset, valid_set: FfnnDataset) -> TrainResult:
    """SGD with early stopping on validation MSE; returns the best-epoch parameters."""
    if len(train_set) == 0 or len(valid_set) == 0:
        raise ValueError("train and validation sets must be nonempty")
    if train_set.days.max() >= valid_set.days.min():
        raise ValueError("training samples must precede validation samples")
    model = init_model(
        config, train_set.calendar.shape[1], train_set.lagged.shape[1], train_set.target.shape[1], train_set
    )
    rng = np.random.default_rng([config.seed, 1])
    velocity = {k: np.zeros_like(v) for k, v in model.params.items()}
    best = (math.inf, 0, {k: v.copy() for k, v in model.params.items()})
    history = []
    for epoch in range(1, config.epochs + 1):
        _run_epoch(model, train_set, rng, velocity)
        with np.errstate(over="ignore", invalid="ignore"):
            v = _mse(model, valid_set)
        if not math.isfinite(v):
            raise TrainingDivergedError(f"training diverged (non-finite validation loss) for config {config}")
        history.append(v)
        if v < best[0]:
            best = (v, epoch, {k: w.copy() for k, w in model.params.items()})
        elif epoch - best[1] >= config.patience:
            break
    model.params = best[2]
    return TrainResult(model, best[1], best[0], history)


def train_fixed(config: FfnnConfig, data: FfnnDataset, epochs: int) -> FfnnModel:
    """Train for exactly ``epochs`` epochs on ``data`` (no early stopping)."""
    model = init_model(config, data.calendar.shape[1], data.lagged.shape[1], data.target.shape[1], data)
    rng = np.random.default_rng([config.seed, 1])
    velocity = {k: np.zeros_like(v) for k, v in model.params.items()}
    for _ in range(max(1, int(epochs))):
        _run_epoch(model, data, rng, velocity)
    return model


# ---------------------------------------------------------------------------
# Search and ensemble
# ---------------------------------------------------------------------------

DEFAULT_SEARCH_SPACE: dict = {
    "hidden_size": [32, 64, 128, 256],
    "hidden_layers": [1, 2, 3],
    "context_size": [4, 8, 16],
    "batch_size": [16, 32, 64],
    "dropout": [0.0, 0.1, 0.2, 0.3],
    "learning_rate": ("loguniform", 1e-4, 1e-1),
    "lags": [0, 3, 7, 14],
    "homothety": [1.0, 2.0, 3.0, 4.0],
}


def sample_config(space: dict, rng: np.random.Generator, base: FfnnConfig) -> FfnnConfig:
    values = {}
    for name, choices in space.items():
        if isinstance(choices, tuple) and choices and choices[0] == "loguniform":
            lo, hi = choices[1], choices[2]
            values[name] = float(math.exp(rng.uniform(math.log(lo), math.log(hi))))
        else:
            pick = choices[int(rng.integers(len(choices)))]
            values[name] = pick.item() if isinstance(pick, np.generic) else pick
    return replace(base, **values)


@dataclass
class Trial:
    index: int
    config: FfnnConfig
    best_epoch: int
    valid_mse: float


def hyperparameter_search(
    panel: PanelMatrix,
    budget: int = 60,
    space: dict | None = None,
    seed: int = 0,
    base: FfnnConfig | None = None,
    valid_fraction: float = 0.2,
    configs: Sequence[FfnnConfig] | None = None,
) -> list[Trial]:
    """Seeded random search; trials ranked by validation MSE (diverged trials last).

    ``configs`` overrides random sampling with an explicit list of trials.
    """
    space = DEFAULT_SEARCH_SPACE if space is None else space
    base = FfnnConfig() if base is None else base
    if configs is None:
        rng = np.random.default_rng(seed)
        child_seeds = np.random.SeedSequence(seed).generate_state(budget)
        configs = [replace(sample_config(space, rng, base), seed=int(s)) for s in child_seeds]
    trials = []
    cache: dict[tuple[int, bool], tuple] = {}
    for i, cfg in enumerate(configs):
        key = (cfg.lags, cfg.include_month)
        if key not in cache:
            pre, _, _ = build_features(panel, cfg.lags, cfg.include_month)
            cache[key] = chronological_split(pre, valid_fraction)
        tr, va = cache[key]
        try:
            res = train(cfg, tr, va)
            trials.append(Trial(i, cfg, res.best_epoch, res.valid_mse))
        except TrainingDivergedError as exc:
            logger.info("trial %d diverged: %s", i, exc)
            trials.append(Trial(i, cfg, 0, math.inf))
    trials.sort(key=lambda t: (t.valid_mse, t.index))
    return trials


@dataclass
class EnsembleModel:
    members: list[FfnnModel]
    trials: list[Trial]

    def predict(self, panel: PanelMatrix) -> np.ndarray:
        """Mean member prediction over the treatment window, shape ``(n_outputs, T1)``."""
        preds = []
        for m in self.members:
            _, post, _ = build_features(panel, m.config.lags, m.config.include_month)
            preds.append(m.predict(post).T)
        return np.mean(preds, axis=0)


def finalize_and_predict(
    ranked: Sequence[Trial],
    panel: PanelMatrix,
    n_members: int = 15,
    scenario: str = "S2",
):
    """Retrain the best ``n_members`` configurations on all pre-treatment data and average.

    Each member is retrained for its stored best epoch count. Diverging
    members are dropped with a warning; at least ``8/15`` of the requested
    members must survive.
    """
    candidates = [t for t in ranked if math.isfinite(t.valid_mse)][:n_members]
    if len(candidates) < n_members:
        raise ValueError(f"need {n_members} successful trials, got {len(candidates)}")
    members, kept = [], []
    for t in candidates:
        pre, _, _ = build_features(panel, t.config.lags, t.config.include_month)
        try:
            members.append(train_fixed(t.config, pre, t.best_epoch))
            kept.append(t)
        except TrainingDivergedError:
            warnings.warn(f"ensemble member {t.index} diverged during retraining; dropped", RuntimeWarning)
    if len(members) < math.ceil(8 * n_members / 15):
        raise TrainingDivergedError(f"only {len(members)} of {n_members} ensemble members survived")
    ens = EnsembleModel(members, kept)
    return CounterfactualSeries(ens.predict(panel), scenario, "FFNN"), ens


def write_search_results(trials: Sequence[Trial], path: str | Path) -> None:
    import csv

    fields = list(asdict(FfnnConfig()).keys())
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["trial"] + fields + ["best_epoch", "valid_mse"])
        for t in trials:
            cfg = asdict(t.config)
            w.writerow([t.index] + [cfg[f] for f in fields] + [t.best_epoch, repr(float(t.valid_mse))])


class FeedForwardCounterfactual(RegressorMixin, BaseEstimator):
    """Ensemble FFNN counterfactual for one or several treated series.

    ``fit(panel)`` runs the random search on the pre-treatment window and
    retrains the best members; ``predict()`` returns ``(T1, n_treated)``.

    Parameters
    ----------
    n_trials : int, default=60
    n_members : int, default=15
    search_space : dict or None
        Overrides :data:`DEFAULT_SEARCH_SPACE`.
    max_epochs, patience : int
        Early-stopping budget for each trial.
    random_state : int, default=0
    """

    def __init__(self, n_trials=60, n_members=15, search_space=None, max_epochs=500, patience=20, random_state=0):
        self.n_trials = n_trials
        self.n_members = n_members
        self.search_space = search_space
        self.max_epochs = max_epochs
        self.patience = patience
        self.random_state = random_state

    def fit(self, panel: PanelMatrix, y=None):
        if self.n_trials < self.n_members:
            raise ValueError("n_trials must be at least n_members")
        base = FfnnConfig(epochs=self.max_epochs, patience=self.patience)
        self.trials_ = hyperparameter_search(panel, self.n_trials, self.search_space, self.random_state, base)
        self.counterfactual_, self.ensemble_ = finalize_and_predict(
            self.trials_, panel, self.n_members, "S2" if panel.n_treated > 1 else "S1"
        )
        return self

    def predict(self, X=None):
        check_is_fitted(self, "ensemble_")
        if X is None:
            return self.counterfactual_.values.T
        return self.ensemble_.predict(X).T
