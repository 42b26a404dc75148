"""Drift least squares and quasi-maximum likelihood for the nuisance parameter theta."""

import logging
import math
from collections.abc import Callable, Sequence
from typing import Any, Optional

import numpy as np

from .errors import DriftNotIdentifiedError, LikelihoodUndefinedError
from .models import DriftEstimate, FilterParams, Path, ThetaEstimate, ThetaSearchConfig
from .volfilter import filter_recursion

logger = logging.getLogger(__name__)

_INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0

DEFAULT_TEMPLATE = FilterParams(theta=1.0, alpha_hat=0.0, beta_hat=0.0)


def drift_lse(path: Path) -> DriftEstimate:
    """Least-squares drift from the exact discretisation.

    Regresses ``X_k = c0 + c1 X_{k-1} + e_k``. For ``dX = (alpha + beta X) dt + ...``
    the conditional mean over one step is affine in ``X_{k-1}`` with
    ``c1 = exp(beta dt)`` and ``c0 = alpha (c1 - 1) / beta``.
    """
    if len(path) < 3:
        raise ValueError("drift estimation needs at least 3 observations")
    prev, curr = path.values[:-1], path.values[1:]
    if np.ptp(prev) == 0:
        raise DriftNotIdentifiedError("observations are constant")

    design = np.column_stack([np.ones_like(prev), prev])
    (c0, c1), *_ = np.linalg.lstsq(design, curr, rcond=None)
    if c1 <= 0:
        raise DriftNotIdentifiedError(f"autoregressive slope {c1:.6g} is not positive")
    if abs(c1 - 1.0) < 1e-12:
        raise DriftNotIdentifiedError("autoregressive slope is 1")

    beta_hat = math.log(c1) / path.dt
    alpha_hat = c0 * beta_hat / (c1 - 1.0)
    residual_ss = float(np.sum((curr - c0 - c1 * prev) ** 2))
    return DriftEstimate(
        alpha_hat=float(alpha_hat), beta_hat=float(beta_hat), residual_ss=residual_ss
    )


def _batch_log_likelihood(
    values: np.ndarray,
    theta: Any,
    alpha: Any,
    beta: Any,
    *,
    dt: float,
    init_window_len: int,
    template: FilterParams,
    y1_init: Any = None,
) -> np.ndarray:
    """Log-likelihood over the broadcast shape of the arguments; NaN where undefined.

    ``y1_init`` overrides ``template.y1_init``, for instance with one slope per path.
    """
    out = filter_recursion(
        values,
        theta,
        alpha,
        beta,
        dt=dt,
        init_window_len=init_window_len,
        y1_init=template.y1_init if y1_init is None else y1_init,
        y_floor=template.y_floor,
        innovation=template.innovation,
        keep_series=False,
    )
    loglik = np.where(out.skipped < out.steps, out.loglik, np.nan)
    return np.where(np.isfinite(loglik), loglik, np.nan)


def log_likelihood(path: Path, params: FilterParams, init_window_len: int) -> float:
    """Sum of Gaussian one-step predictive log densities over the post-window steps."""
    loglik = _batch_log_likelihood(
        path.values,
        params.theta,
        params.alpha_hat,
        params.beta_hat,
        dt=path.dt,
        init_window_len=init_window_len,
        template=params,
    )
    if np.isnan(loglik):
        raise LikelihoodUndefinedError()
    return float(loglik)


def log_likelihood_profile(
    path: Path,
    drift: DriftEstimate,
    thetas: Sequence[float],
    init_window_len: int,
    template: FilterParams = DEFAULT_TEMPLATE,
) -> np.ndarray:
    """Log-likelihood at each theta in one pass over the path; NaN where undefined."""
    thetas = np.asarray(thetas, dtype=float)
    if np.any(np.abs(thetas) < template.theta_min_abs):
        raise ValueError(f"|theta| must be at least {template.theta_min_abs:g}")
    return _batch_log_likelihood(
        path.values,
        thetas,
        drift.alpha_hat,
        drift.beta_hat,
        dt=path.dt,
        init_window_len=init_window_len,
        template=template,
    )


def theta_grid(search: ThetaSearchConfig) -> np.ndarray:
    """Candidates ``+m0, -m0, +m1, -m1, ...`` over log-spaced magnitudes ``m``."""
    magnitudes = np.geomspace(
        search.theta_min_abs, search.theta_max_abs, search.grid_points
    )
    return np.column_stack([magnitudes, -magnitudes]).ravel()


def golden_section_max(
    f: Callable[[np.ndarray], np.ndarray], lo: Any, hi: Any, iters: int
) -> tuple[np.ndarray, np.ndarray]:
    """Maximise ``f`` over ``[lo, hi]`` elementwise with a fixed number of iterations.

    ``f`` maps an array of points to an array of values of the same shape; NaN counts as
    minus infinity. Returns the best evaluated point and its value.
    """
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)

    def evaluate(x: np.ndarray) -> np.ndarray:
        fx = np.asarray(f(x), dtype=float)
        return np.where(np.isnan(fx), -np.inf, fx)

    a, b = lo, hi
    c = b - _INV_PHI * (b - a)
    d = a + _INV_PHI * (b - a)
    fc, fd = evaluate(c), evaluate(d)
    best_x = np.where(fc >= fd, c, d)
    best_f = np.maximum(fc, fd)

    for _ in range(iters):
        left = fc >= fd
        a, b = np.where(left, a, c), np.where(left, d, b)
        keep_x = np.where(left, c, d)
        keep_f = np.where(left, fc, fd)
        x_new = np.where(left, b - _INV_PHI * (b - a), a + _INV_PHI * (b - a))
        f_new = evaluate(x_new)
        c, fc = np.where(left, x_new, keep_x), np.where(left, f_new, keep_f)
        d, fd = np.where(left, keep_x, x_new), np.where(left, keep_f, f_new)

        better = f_new > best_f
        best_x = np.where(better, x_new, best_x)
        best_f = np.where(better, f_new, best_f)

    return best_x, best_f


def theta_qmle_batch(
    values: Any,
    dt: float,
    drifts: Sequence[DriftEstimate],
    search: ThetaSearchConfig,
    init_window_len: int,
    template: FilterParams = DEFAULT_TEMPLATE,
    y1_init: Any = None,
) -> list[Optional[ThetaEstimate]]:
    """Quasi-likelihood theta for each column of ``values`` (shape ``(n, n_paths)``).

    The signed log-spaced grid is evaluated for every path in one recursion; the best
    point is then refined by golden section in ``log|theta|`` between its grid
    neighbours of the same sign. Ties keep the smallest ``|theta|``, positive before
    negative. Entries are None where every candidate's likelihood is undefined.
    ``y1_init``, scalar or one value per path, replaces ``template.y1_init``.
    """
    values = np.asarray(values, dtype=float)
    if values.ndim != 2:
        raise ValueError("values must have shape (n_obs, n_paths)")
    n_paths = values.shape[1]
    if len(drifts) != n_paths:
        raise ValueError("one drift estimate is needed per path")
    alpha = np.array([d.alpha_hat for d in drifts])
    beta = np.array([d.beta_hat for d in drifts])

    def loglik(theta: np.ndarray, stacked: np.ndarray) -> np.ndarray:
        return _batch_log_likelihood(
            stacked,
            theta,
            alpha,
            beta,
            dt=dt,
            init_window_len=init_window_len,
            template=template,
            y1_init=y1_init,
        )

    candidates = theta_grid(search)
    grid_ll = loglik(candidates[:, None], values[:, None, :])
    grid_ll = np.where(np.isnan(grid_ll), -np.inf, grid_ll)
    best = np.argmax(grid_ll, axis=0)
    columns = np.arange(n_paths)
    grid_best_ll = grid_ll[best, columns]
    grid_best_theta = candidates[best]
    evaluations = candidates.size

    theta_hat = grid_best_theta.copy()
    theta_ll = grid_best_ll.copy()
    if search.refine_iters > 0:
        log_mag = np.log(np.abs(candidates[::2]))
        mag_index = best // 2
        sign = np.sign(grid_best_theta)
        lo = log_mag[np.maximum(mag_index - 1, 0)]
        hi = log_mag[np.minimum(mag_index + 1, log_mag.size - 1)]

        refined_x, refined_ll = golden_section_max(
            lambda u: loglik(sign * np.exp(u), values), lo, hi, search.refine_iters
        )
        better = refined_ll > grid_best_ll
        theta_hat = np.where(better, sign * np.exp(refined_x), theta_hat)
        theta_ll = np.where(better, refined_ll, theta_ll)
        evaluations += search.refine_iters + 2

    results: list[Optional[ThetaEstimate]] = []
    for i in range(n_paths):
        if not np.isfinite(grid_best_ll[i]):
            results.append(None)
            continue
        results.append(
            ThetaEstimate(
                theta=float(theta_hat[i]),
                log_likelihood=float(theta_ll[i]),
                grid_best_theta=float(grid_best_theta[i]),
                evaluations=evaluations,
            )
        )
    undefined = sum(r is None for r in results)
    if undefined:
        logger.debug(
            "likelihood undefined on every candidate for %d of %d paths",
            undefined,
            n_paths,
        )
    return results


def theta_qmle(
    path: Path,
    drift: DriftEstimate,
    search: ThetaSearchConfig,
    init_window_len: int,
    template: FilterParams = DEFAULT_TEMPLATE,
) -> float:
    """Quasi-maximum-likelihood estimate of theta on one path."""
    (estimate,) = theta_qmle_batch(
        path.values[:, None], path.dt, [drift], search, init_window_len, template
    )
    if estimate is None:
        raise LikelihoodUndefinedError("no theta candidate gives a defined likelihood")
    return estimate.theta
