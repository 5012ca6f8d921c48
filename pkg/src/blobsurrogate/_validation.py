"""Input validation helpers used at public API boundaries."""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, GeometryError


def check_finite(arr: np.ndarray, name: str) -> np.ndarray:
    """Raise :class:`GeometryError` if ``arr`` contains NaN or infinity."""
    if not np.isfinite(arr).all():
        raise GeometryError(f"{name} contains non-finite values")
    return arr


def check_positive(value: float, name: str) -> float:
    if not np.isfinite(value) or value <= 0:
        raise ConfigError(f"{name} must be positive and finite, got {value!r}")
    return float(value)


def check_in_range(value: float, lo: float, hi: float, name: str) -> float:
    if not (lo <= value <= hi):
        raise ConfigError(f"{name} must lie in [{lo}, {hi}], got {value!r}")
    return float(value)


def check_rank(arr: np.ndarray, rank: int, name: str) -> np.ndarray:
    if arr.ndim != rank:
        raise GeometryError(f"{name} must have rank {rank}, got rank {arr.ndim}")
    return arr


def check_odd(value: int, name: str) -> int:
    value = int(value)
    if value < 1 or value % 2 == 0:
        raise ConfigError(f"{name} must be a positive odd integer, got {value!r}")
    return value
