"""Panel data model: the units x periods outcome matrix and its treatment layout.

Treated units always occupy the first ``n_treated`` rows and the first ``t0``
columns are the pre-treatment periods, so every estimator can slice the four
blocks without bookkeeping.
"""

from __future__ import annotations

import csv
import datetime as dt
from dataclasses import dataclass, field
from math import pi
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "PanelError",
    "PanelMatrix",
    "TreatmentMask",
    "CalendarFeatures",
    "calendar_features",
    "load_panel",
    "save_panel",
    "block_views",
    "aggregate_treated",
    "WEEKS_PER_YEAR",
]

# Mean ISO year length in weeks; keeps week 52 -> week 1 adjacent on the circle.
WEEKS_PER_YEAR = 365.2425 / 7.0


class PanelError(ValueError):
    """Raised when panel data violates a structural precondition."""


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class TreatmentMask:
    """Treated cells are rows ``0..n_treated-1`` crossed with columns ``t0..T-1``."""

    n_units: int
    n_periods: int
    n_treated: int
    t0: int

    @property
    def status(self) -> np.ndarray:
        """Boolean matrix W, True on treated (unit, period) pairs."""
        w = np.zeros((self.n_units, self.n_periods), dtype=bool)
        w[: self.n_treated, self.t0 :] = True
        return w

    @property
    def treated_pairs(self) -> set[tuple[int, int]]:
        return {
            (i, t)
            for i in range(self.n_treated)
            for t in range(self.t0, self.n_periods)
        }

    @property
    def untreated_pairs(self) -> set[tuple[int, int]]:
        treated = self.treated_pairs
        return {
            (i, t)
            for i in range(self.n_units)
            for t in range(self.n_periods)
            if (i, t) not in treated
        }

    def __contains__(self, pair: tuple[int, int]) -> bool:
        i, t = pair
        return 0 <= i < self.n_treated and self.t0 <= t < self.n_periods


@dataclass(frozen=True, eq=False)
class PanelMatrix:
    """Immutable N x T outcome matrix with unit roles and a treatment start.

    Parameters
    ----------
    outcomes : ndarray of shape (n_units, n_periods)
        Nonnegative daily outcomes. Entries where ``observed`` is False hold
        0.0 and must never be read as data.
    unit_ids : sequence of str
        One label per row; treated units first.
    dates : sequence of datetime.date
        Consecutive calendar days, one per column.
    n_treated : int
        Number of treated rows.
    t0 : int
        Number of pre-treatment periods (columns ``0..t0-1``).
    observed : ndarray of bool, optional
        Observation mask; defaults to fully observed.
    """

    outcomes: np.ndarray
    unit_ids: tuple[str, ...]
    dates: tuple[dt.date, ...]
    n_treated: int
    t0: int
    observed: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        y = np.asarray(self.outcomes, dtype=float)
        if y.ndim != 2:
            raise PanelError(f"outcomes must be 2-D, got shape {y.shape}")
        n, t = y.shape
        obs = (
            np.ones_like(y, dtype=bool)
            if self.observed is None
            else np.asarray(self.observed, dtype=bool)
        )
        if obs.shape != y.shape:
            raise PanelError("observed mask shape does not match outcomes")
        y = np.where(obs, y, 0.0)
        if not np.all(np.isfinite(y)):
            raise PanelError("outcomes must be finite on observed entries")
        if np.any(y < 0):
            raise PanelError("outcomes must be nonnegative")
        if len(self.unit_ids) != n:
            raise PanelError("unit_ids length does not match number of rows")
        if len(set(self.unit_ids)) != n:
            raise PanelError("unit_ids must be unique")
        if len(self.dates) != t:
            raise PanelError("dates length does not match number of columns")
        for a, b in zip(self.dates, self.dates[1:]):
            if (b - a).days != 1:
                raise PanelError(f"dates must be consecutive days ({a} -> {b})")
        if not 1 <= self.n_treated <= n - 1:
            raise PanelError("need at least one treated and one control unit")
        if not 1 <= self.t0 < t:
            raise PanelError(f"t0 must satisfy 1 <= t0 < T, got t0={self.t0}, T={t}")
        object.__setattr__(self, "outcomes", _readonly(y))
        object.__setattr__(self, "observed", _readonly(obs))
        object.__setattr__(self, "unit_ids", tuple(str(u) for u in self.unit_ids))
        object.__setattr__(self, "dates", tuple(self.dates))

    @property
    def n_units(self) -> int:
        return self.outcomes.shape[0]

    @property
    def n_periods(self) -> int:
        return self.outcomes.shape[1]

    @property
    def n_control(self) -> int:
        return self.n_units - self.n_treated

    @property
    def t1(self) -> int:
        return self.n_periods - self.t0

    @property
    def treatment_mask(self) -> TreatmentMask:
        return TreatmentMask(self.n_units, self.n_periods, self.n_treated, self.t0)

    @property
    def fully_observed(self) -> bool:
        return bool(self.observed.all())

    @property
    def treated_ids(self) -> tuple[str, ...]:
        return self.unit_ids[: self.n_treated]

    @property
    def control_ids(self) -> tuple[str, ...]:
        return self.unit_ids[self.n_treated :]

    def replace(self, **changes) -> "PanelMatrix":
        kw = dict(
            outcomes=self.outcomes,
            unit_ids=self.unit_ids,
            dates=self.dates,
            n_treated=self.n_treated,
            t0=self.t0,
            observed=self.observed,
        )
        kw.update(changes)
        return PanelMatrix(**kw)

    def window(self, start: int, stop: int) -> "PanelMatrix":
        """Columns ``[0, stop)`` with the treatment starting at column ``start``."""
        return self.replace(
            outcomes=self.outcomes[:, :stop],
            observed=self.observed[:, :stop],
            dates=self.dates[:stop],
            t0=start,
        )

    def select_units(self, treated: Sequence[int], controls: Sequence[int]) -> "PanelMatrix":
        rows = list(treated) + list(controls)
        return self.replace(
            outcomes=self.outcomes[rows],
            observed=self.observed[rows],
            unit_ids=tuple(self.unit_ids[r] for r in rows),
            n_treated=len(treated),
        )

    def date_index(self, date: dt.date) -> int:
        offset = (date - self.dates[0]).days
        if not 0 <= offset < self.n_periods:
            raise PanelError(f"{date} outside panel range {self.dates[0]}..{self.dates[-1]}")
        return offset


def block_views(p: PanelMatrix):
    """Return ``(pre_treated, pre_control, post_control, post_treated)`` views."""
    y, nt, t0 = p.outcomes, p.n_treated, p.t0
    return y[:nt, :t0], y[nt:, :t0], y[nt:, t0:], y[:nt, t0:]


def aggregate_treated(p: PanelMatrix) -> PanelMatrix:
    """Collapse the treated rows into their daily sum (scenario S1)."""
    if p.n_treated == 1:
        return p
    if not p.observed[: p.n_treated].all():
        raise PanelError("cannot aggregate treated units with missing entries")
    agg = p.outcomes[: p.n_treated].sum(axis=0, keepdims=True)
    return p.replace(
        outcomes=np.vstack([agg, p.outcomes[p.n_treated :]]),
        observed=np.vstack([np.ones((1, p.n_periods), bool), p.observed[p.n_treated :]]),
        unit_ids=("treated_aggregate",) + p.control_ids,
        n_treated=1,
    )


@dataclass(frozen=True, eq=False)
class CalendarFeatures:
    """Day-of-week, ISO week-of-year and month per date, with circular encodings."""

    dow: np.ndarray
    woy: np.ndarray
    month: np.ndarray

    @property
    def dow_angle(self) -> np.ndarray:
        return 2 * pi * self.dow / 7.0

    @property
    def woy_angle(self) -> np.ndarray:
        return 2 * pi * (self.woy - 1) / WEEKS_PER_YEAR

    def encoded(self, include_month: bool = False) -> np.ndarray:
        """(T, 4) array ``[cos dow, sin dow, cos woy, sin woy]`` (+2 month columns)."""
        cols = [
            np.cos(self.dow_angle),
            np.sin(self.dow_angle),
            np.cos(self.woy_angle),
            np.sin(self.woy_angle),
        ]
        if include_month:
            ang = 2 * pi * (self.month - 1) / 12.0
            cols += [np.cos(ang), np.sin(ang)]
        return np.column_stack(cols)


def calendar_features(dates: Iterable[dt.date]) -> CalendarFeatures:
    dates = list(dates)
    return CalendarFeatures(
        dow=np.array([d.weekday() for d in dates], dtype=float),
        woy=np.array([d.isocalendar()[1] for d in dates], dtype=float),
        month=np.array([d.month for d in dates], dtype=float),
    )


def load_panel(
    path: str | Path,
    treated: int | Sequence[str],
    treatment_start: dt.date | str,
) -> PanelMatrix:
    """Read a long-format ``unit_id,date,revenue`` CSV into a :class:`PanelMatrix`.

    ``treated`` is either a list of unit ids or a count, in which case the
    first units in order of appearance in the file are treated. Absent
    (unit, date) rows become missing entries.
    """
    if isinstance(treatment_start, str):
        treatment_start = dt.date.fromisoformat(treatment_start)
    records: dict[tuple[str, dt.date], float] = {}
    order: dict[str, None] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing_cols = {"unit_id", "date", "revenue"} - set(reader.fieldnames or ())
        if missing_cols:
            raise PanelError(f"missing columns: {sorted(missing_cols)}")
        for row in reader:
            key = (row["unit_id"], dt.date.fromisoformat(row["date"]))
            if key in records:
                raise PanelError(f"duplicate row for unit {key[0]} on {key[1]}")
            records[key] = float(row["revenue"])
            order.setdefault(row["unit_id"], None)
    if not records:
        raise PanelError("empty panel file")

    all_dates = sorted({d for _, d in records})
    first, last = all_dates[0], all_dates[-1]
    if (last - first).days + 1 != len(all_dates):
        raise PanelError("dates are not a contiguous daily range")
    if treatment_start < first:
        raise PanelError("treatment start precedes panel")
    if treatment_start > last:
        raise PanelError("treatment start follows panel end")

    units = list(order)
    if isinstance(treated, (int, np.integer)):
        treated_ids = units[: int(treated)]
    else:
        treated_ids = [str(u) for u in treated]
        unknown = [u for u in treated_ids if u not in order]
        if unknown:
            raise PanelError(f"unknown treated unit id(s): {unknown}")
    treated_set = set(treated_ids)
    rows = treated_ids + [u for u in units if u not in treated_set]
    row_of = {u: i for i, u in enumerate(rows)}

    y = np.zeros((len(rows), len(all_dates)))
    obs = np.zeros_like(y, dtype=bool)
    for (u, d), v in records.items():
        i, t = row_of[u], (d - first).days
        y[i, t] = v
        obs[i, t] = True
    return PanelMatrix(
        outcomes=y,
        unit_ids=tuple(rows),
        dates=tuple(all_dates),
        n_treated=len(treated_ids),
        t0=(treatment_start - first).days,
        observed=obs,
    )


def save_panel(p: PanelMatrix, path: str | Path) -> None:
    """Write the observed entries as long-format CSV (missing entries omitted)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["unit_id", "date", "revenue"])
        for i, u in enumerate(p.unit_ids):
            for t, d in enumerate(p.dates):
                if p.observed[i, t]:
                    w.writerow([u, d.isoformat(), repr(float(p.outcomes[i, t]))])
