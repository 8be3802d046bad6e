"""Control-unit selection: sparse-unit filter and correlation ranking."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .panel import PanelError, PanelMatrix

__all__ = [
    "SelectionConfig",
    "Selection",
    "zero_fraction",
    "apply_sparse_rule",
    "pearson",
    "select_by_correlation",
    "read_exclusions",
    "write_selection_report",
]


@dataclass(frozen=True)
class SelectionConfig:
    sparsity_threshold: float = 0.85
    top_k: int = 40
    exclusions: frozenset[str] = field(default_factory=frozenset)

    def __post_init__(self):
        if not 0.0 < self.sparsity_threshold < 1.0:
            raise ValueError("sparsity_threshold must lie in (0, 1)")
        if self.top_k < 1:
            raise ValueError("top_k must be at least 1")
        object.__setattr__(self, "exclusions", frozenset(self.exclusions))


@dataclass
class Selection:
    """Selected control ids plus the ranked rows behind them."""

    control_ids: list[str]
    ranking: list[tuple[str, int, str, float]]

    def __contains__(self, uid) -> bool:
        return uid in self.control_ids


def zero_fraction(p: PanelMatrix) -> np.ndarray:
    """Per-unit fraction of periods with zero or missing revenue."""
    return np.mean((p.outcomes == 0) | ~p.observed, axis=1)


def _candidates(p: PanelMatrix, exclusions) -> list[int]:
    return [i for i in range(p.n_treated, p.n_units) if p.unit_ids[i] not in exclusions]


def apply_sparse_rule(p: PanelMatrix, threshold: float = 0.85, exclusions=frozenset()) -> list[str]:
    """Candidate control ids whose zero-or-missing fraction does not exceed ``threshold``.

    The count is compared exactly (``zeros > threshold * T``) so a unit sitting
    on the boundary is retained.
    """
    zeros = np.sum((p.outcomes == 0) | ~p.observed, axis=1)
    limit = threshold * p.n_periods
    return [p.unit_ids[i] for i in _candidates(p, exclusions) if not zeros[i] > limit + 1e-9 * limit]


def pearson(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pearson correlation of ``a`` (length T) with each row of ``b`` (K x T).

    Rows with zero variance give NaN.
    """
    a = np.asarray(a, dtype=float)
    b = np.atleast_2d(np.asarray(b, dtype=float))
    ac = a - a.mean()
    bc = b - b.mean(axis=1, keepdims=True)
    den = np.sqrt(np.sum(ac**2) * np.sum(bc**2, axis=1))
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(den > 0, bc @ ac / np.where(den > 0, den, 1.0), np.nan)


def select_by_correlation(p: PanelMatrix, cfg: SelectionConfig | None = None, candidates=None) -> Selection:
    """Union over treated units of the ``top_k`` candidates by signed correlation.

    Correlations use the pre-treatment window only. Ties are broken by unit id;
    candidates with zero variance are never selected. ``candidates`` defaults
    to the output of :func:`apply_sparse_rule`.
    """
    cfg = SelectionConfig() if cfg is None else cfg
    if candidates is None:
        candidates = apply_sparse_rule(p, cfg.sparsity_threshold, cfg.exclusions)
    candidates = [c for c in candidates if c not in cfg.exclusions]
    index = {u: i for i, u in enumerate(p.unit_ids)}
    unknown = [c for c in candidates if c not in index]
    if unknown:
        raise PanelError(f"unknown candidate ids: {unknown[:5]}")
    rows = np.array([index[c] for c in candidates], dtype=int)
    pre = p.outcomes[:, : p.t0]
    chosen: set[str] = set()
    ranking = []
    for i in range(p.n_treated):
        tid = p.unit_ids[i]
        if np.ptp(pre[i]) == 0:
            raise PanelError(f"treated unit {tid} has zero pre-treatment variance")
        if rows.size == 0:
            continue
        r = pearson(pre[i], pre[rows])
        order = sorted(
            (k for k in range(rows.size) if np.isfinite(r[k])),
            key=lambda k: (-r[k], candidates[k]),
        )[: cfg.top_k]
        for rank, k in enumerate(order, start=1):
            ranking.append((tid, rank, candidates[k], float(r[k])))
            chosen.add(candidates[k])
    ordered = [u for u in p.unit_ids if u in chosen]
    return Selection(ordered, ranking)


def read_exclusions(path: str | Path) -> frozenset[str]:
    """Newline-delimited unit ids; blank lines and ``#`` comments ignored."""
    ids = set()
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            ids.add(line)
    return frozenset(ids)


def write_selection_report(sel: Selection, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["treated_id", "rank", "control_id", "correlation"])
        for tid, rank, cid, r in sel.ranking:
            w.writerow([tid, rank, cid, repr(r)])
