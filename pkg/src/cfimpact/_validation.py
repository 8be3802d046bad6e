"""Input validation shared by the estimators."""

from __future__ import annotations

import numpy as np


class ConvergenceError(RuntimeError):
    """An iterative solver hit its iteration cap.

    The last objective value is kept on ``objective`` for diagnostics.
    """

    def __init__(self, message: str, objective: float | None = None):
        super().__init__(message)
        self.objective = objective


def check_series(y, name: str = "y") -> np.ndarray:
    y = np.asarray(y, dtype=float)
    if y.ndim == 2 and 1 in y.shape:
        y = y.ravel()
    if y.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional, got shape {y.shape}")
    if y.size == 0:
        raise ValueError(f"{name} is empty")
    if not np.all(np.isfinite(y)):
        raise ValueError(f"{name} contains non-finite values")
    return y


def check_block(a, name: str = "block", ndim: int = 2) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim == 1 and ndim == 2:
        a = a[None, :]
    if a.ndim != ndim:
        raise ValueError(f"{name} must be {ndim}-D, got shape {a.shape}")
    if a.size == 0:
        raise ValueError(f"{name} is empty")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite values")
    return a


def check_pre_blocks(pre_treated, pre_control):
    """Validate a treated series of length T0 against an N^c x T0 control block."""
    y = check_series(pre_treated, "pre_treated")
    x = check_block(pre_control, "pre_control")
    if x.shape[1] != y.shape[0]:
        raise ValueError(
            f"pre_control has {x.shape[1]} periods but pre_treated has {y.shape[0]}"
        )
    return y, x


def check_mask(mask, shape) -> np.ndarray:
    if mask is None:
        return np.ones(shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != tuple(shape):
        raise ValueError(f"mask shape {mask.shape} does not match data shape {shape}")
    return mask


def check_grid(grid, name: str = "grid") -> list:
    grid = list(grid)
    if not grid:
        raise ValueError(f"empty {name}")
    return grid
