"""Comparison estimators: local linear kernel regression and volatility sums."""

import logging
from collections.abc import Sequence
from typing import Any

import numpy as np

from .errors import BandwidthTooSmallError
from .models import KernelConfig, Path

logger = logging.getLogger(__name__)

# Weighted design treated as singular when det < SINGULAR_RTOL * S0 * S2.
SINGULAR_RTOL = 1e-10
# Upper bound on kernel-weight matrix entries built per chunk of evaluation points.
_CHUNK_ENTRIES = 2**20


def epanechnikov(u: Any) -> Any:
    """``K(u) = 3/4 (1 - u^2)`` on ``|u| <= 1``, zero outside."""
    u = np.asarray(u, dtype=float)
    k = np.where(np.abs(u) <= 1.0, 0.75 * (1.0 - u * u), 0.0)
    return float(k) if k.ndim == 0 else k


def kernel_weights(x: Any, x0: Any, bandwidth: float) -> np.ndarray:
    """``K_h(x - x0) = K((x - x0) / h) / h``."""
    return np.asarray(epanechnikov((np.asarray(x) - x0) / bandwidth)) / bandwidth


def z_star(path: Path) -> tuple[np.ndarray, np.ndarray]:
    """Regression pairs ``(X_{k-1}, (X_k - X_{k-1})^2 / dt)``."""
    return path.values[:-1], np.diff(path.values) ** 2 / path.dt


def _solve(
    weights: np.ndarray, dx: np.ndarray, z: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Weighted normal equations along the last axis.

    Returns ``(beta0, beta1, ok, n_eff)``.
    """
    s0 = weights.sum(axis=-1)
    s1 = (weights * dx).sum(axis=-1)
    s2 = (weights * dx * dx).sum(axis=-1)
    t0 = (weights * z).sum(axis=-1)
    t1 = (weights * dx * z).sum(axis=-1)
    det = s0 * s2 - s1 * s1
    n_eff = (weights > 0).sum(axis=-1)
    ok = (n_eff >= 2) & (det > SINGULAR_RTOL * s0 * s2)
    safe = np.where(ok, det, 1.0)
    beta0 = (s2 * t0 - s1 * t1) / safe
    beta1 = (s0 * t1 - s1 * t0) / safe
    return beta0, beta1, ok, n_eff


def local_linear_fit(
    path: Path, x0: float, config: KernelConfig
) -> tuple[float, float]:
    """Kernel-weighted least squares of ``Z*`` on ``(1, X - x0)``.

    ``beta0`` estimates ``g(x0)``.
    """
    x, z = z_star(path)
    weights = kernel_weights(x, x0, config.bandwidth)
    beta0, beta1, ok, n_eff = _solve(weights, x - x0, z)
    if not ok:
        raise BandwidthTooSmallError(x0, int(n_eff))
    return float(beta0), float(beta1)


def _local_linear(
    x: Any, z: Any, eval_points: Any, config: KernelConfig
) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=float)
    z = np.asarray(z, dtype=float)
    points = np.asarray(eval_points, dtype=float).ravel()
    level = np.full(points.size, np.nan)
    slope = np.full(points.size, np.nan)

    chunk = max(1, _CHUNK_ENTRIES // max(1, x.size))
    for start in range(0, points.size, chunk):
        x0 = points[start : start + chunk, None]
        dx = x[None, :] - x0
        weights = kernel_weights(dx, 0.0, config.bandwidth)
        beta0, beta1, ok, _ = _solve(weights, dx, z[None, :])
        level[start : start + chunk] = np.where(ok, beta0, np.nan)
        slope[start : start + chunk] = np.where(ok, beta1, np.nan)

    missing = int(np.isnan(level).sum())
    if missing:
        logger.debug("local linear fit failed at %d of %d points", missing, points.size)
    return level, slope


def local_linear_estimates(
    x: Any, z: Any, eval_points: Any, config: KernelConfig
) -> np.ndarray:
    """``beta0`` at each evaluation point from the pairs ``(x, z)``, NaN on failure."""
    return _local_linear(x, z, eval_points, config)[0]


def local_linear_slopes(
    x: Any, z: Any, eval_points: Any, config: KernelConfig
) -> np.ndarray:
    """``beta1``, the local slope of ``g``, at each evaluation point; NaN on failure."""
    return _local_linear(x, z, eval_points, config)[1]


def local_linear_series(
    path: Path, eval_points: Sequence[float], config: KernelConfig
) -> np.ndarray:
    """Local linear volatility estimates at ``eval_points`` fitted on the whole path."""
    x, z = z_star(path)
    return local_linear_estimates(x, z, eval_points, config)


def realized_vol(path: Path) -> float:
    """Sum of squared increments."""
    return float(np.sum(np.diff(path.values) ** 2))


def integrated_vol(spot: Sequence[float], dt: float) -> float:
    """Left-endpoint Riemann sum of a spot volatility series."""
    spot = np.asarray(spot, dtype=float)
    if spot.size == 0:
        raise ValueError("spot series is empty")
    if dt <= 0:
        raise ValueError("dt must be positive")
    return float(np.sum(spot[:-1]) * dt)


def rmse(estimates: Sequence[float], truth: Sequence[float]) -> float:
    """Root mean squared error over the pairs where both values are present."""
    estimates = np.asarray(estimates, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if estimates.shape != truth.shape or estimates.size == 0:
        raise ValueError("estimates and truth must be non-empty and of equal length")
    present = np.isfinite(estimates) & np.isfinite(truth)
    if not present.any():
        raise ValueError("no pair of estimate and truth is present")
    diff = estimates[present] - truth[present]
    return float(np.sqrt(np.mean(diff * diff)))
