"""Recursive spot-volatility filter built on a bilinear approximating system.

Over one observation interval ``[s, s + dt]`` the pair ``(X, Y)`` with ``Y = g(X)`` is
replaced by the linear-coefficient system::

    dX = (alpha_s + a X) dt + sqrt(Y) dB
    dY = (alpha_s y1 + b X + c Y) dt + y1 sqrt(Y) dB

with ``a = beta_hat``, ``b = a * y1``, ``c = theta / 2`` and ``y1`` the slope state
frozen at ``s``. Its conditional mean and covariance are available in closed form,
which gives a Kalman-type predict/update recursion for the unobserved ``Y``.

Everything below the public single-step helpers works on numpy arrays and broadcasts
over any trailing shape: a grid of ``theta`` values and a batch of paths share one
time loop.
"""

import logging
import math
from dataclasses import dataclass
from typing import Any, Optional

import numpy as np

from .models import (
    EstimateSeries,
    FilterDiagnostics,
    FilterParams,
    FilterResult,
    FilterState,
    LocalCoeffs,
    MomentPair,
    Path,
)

logger = logging.getLogger(__name__)

# |d * dt| below which (e^{d dt} - 1) / d is evaluated by its Taylor series.
EXPINT_SWITCH = 1e-4
# |c - a| below DEGENERACY_RTOL * max(1, |a|, |c|) switches to the a = c limit formulas.
DEGENERACY_RTOL = 1e-4
# Predicted variances at or below this skip the update.
V1_MIN = 1e-30

_SERIES_TERMS = 20


def _out(value: np.ndarray) -> Any:
    return float(value) if np.ndim(value) == 0 else value


def expint(d: Any, dt: float) -> Any:
    """``(e^{d dt} - 1) / d``, the integral of ``e^{d u}`` over ``[0, dt]``."""
    d = np.asarray(d, dtype=float)
    z = d * dt
    small = np.abs(z) < EXPINT_SWITCH
    series = dt * (1.0 + z / 2.0 + z * z / 6.0 + z**3 / 24.0)
    direct = np.expm1(z) / np.where(small, 1.0, d)
    return _out(np.where(small, series, direct))


def expint_moment(n: int, d: Any, dt: float) -> Any:
    """``int_0^dt u**n e^{d u} du`` for ``n >= 0``."""
    if n < 0:
        raise ValueError("n must be non-negative")
    d = np.asarray(d, dtype=float)
    z = d * dt
    small = np.abs(z) < 1.0

    coef = [1.0 / (math.factorial(k) * (n + k + 1)) for k in range(_SERIES_TERMS)]
    series = dt ** (n + 1) * np.polynomial.polynomial.polyval(z, coef)

    d_safe = np.where(small, 1.0, d)
    ez = np.exp(z)
    moment = np.asarray(expint(d, dt))
    for j in range(1, n + 1):
        moment = (dt**j * ez - j * moment) / d_safe
    return _out(np.where(small, series, moment))


def is_degenerate(a: Any, c: Any) -> Any:
    """True where ``|c - a|`` falls inside the tolerance band around ``a = c``."""
    a = np.asarray(a, dtype=float)
    c = np.asarray(c, dtype=float)
    scale = np.maximum(1.0, np.maximum(np.abs(a), np.abs(c)))
    return np.abs(c - a) < DEGENERACY_RTOL * scale


def local_coeffs(state: FilterState, params: FilterParams) -> LocalCoeffs:
    """Freeze the coefficients of the approximating system at ``state``.

    The drift is linear, so its linearisation at ``x_s`` is exact:
    ``alpha_s = alpha_hat`` and ``a = beta_hat``.
    """
    a = params.beta_hat
    c = params.theta / 2.0
    b = a * state.y1_s
    degenerate = bool(is_degenerate(a, c))
    if degenerate:
        p = q = math.nan
    else:
        q = b / (c - a)
        p = -q
    return LocalCoeffs(
        a=a,
        alpha_s=params.alpha_hat,
        b=b,
        c=c,
        p=p,
        q=q,
        y1_s=state.y1_s,
        degenerate=degenerate,
    )


def mat_exp(coeffs: LocalCoeffs, dt: float) -> np.ndarray:
    """``exp(A dt)`` for the lower-triangular ``A = [[a, 0], [b, c]]``."""
    if dt < 0:
        raise ValueError("dt must be non-negative")
    a, b, c = coeffs.a, coeffs.b, coeffs.c
    ea = math.exp(a * dt)
    # b (e^{c dt} - e^{a dt}) / (c - a), which tends to b dt e^{a dt} as c -> a
    off = b * ea * expint(c - a, dt)
    return np.array([[ea, 0.0], [off, math.exp(c * dt)]])


class MomentKernel:
    """One-step conditional moments for fixed ``(a, alpha, c, dt)``.

    The coefficients may be arrays; ``moments`` broadcasts them against the state.
    Writing ``K = y1 (alpha + a x_s)``, the conditional mean of ``Y`` at lag ``u`` is
    ``Ya e^{a u} + Yc e^{c u}`` with ``Ya = K / (a - c)`` and ``Yc = y_s - Ya``, and the
    covariance integrals ``I1, I2, I3`` follow by integrating that mean against
    ``e^{2a w}``, ``e^{(a+c) w}`` and ``e^{2c w}``.
    """

    def __init__(self, a: Any, alpha: Any, c: Any, dt: float):
        if dt <= 0:
            raise ValueError("dt must be positive")
        self.a = np.asarray(a, dtype=float)
        self.alpha = np.asarray(alpha, dtype=float)
        self.c = np.asarray(c, dtype=float)
        self.dt = dt
        a, c = self.a, self.c

        self.ea = np.exp(a * dt)
        self.ec = np.exp(c * dt)
        self.e_a = np.asarray(expint(a, dt))
        self.e_c = np.asarray(expint(c, dt))
        self.e_2a_c = np.asarray(expint(2 * a - c, dt))
        self.e_2c_a = np.asarray(expint(2 * c - a, dt))
        self.e_a_c = np.asarray(expint(a - c, dt))

        self.degenerate = np.asarray(is_degenerate(a, c))
        self.any_degenerate = bool(self.degenerate.any())
        self.all_degenerate = bool(self.degenerate.all())
        self.gap = np.where(self.degenerate, 1.0, c - a)
        if self.any_degenerate:
            mid = (a + c) / 2.0
            self.em = np.exp(mid * dt)
            self.e_mid = [np.asarray(expint_moment(n, mid, dt)) for n in range(4)]

    def moments(
        self, x_s: Any, y: Any, y1: Any
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Return ``(mean_x, mean_y, v1, v2, v3)``."""
        a, alpha = self.a, self.alpha
        x_s = np.asarray(x_s, dtype=float)
        y = np.asarray(y, dtype=float)
        y1 = np.asarray(y1, dtype=float)

        k = y1 * (alpha + a * x_s)
        b = a * y1
        mean_x = self.ea * x_s + alpha * self.e_a
        mean_y = self.ec * (y + k * self.e_a_c)

        if not self.all_degenerate:
            ya = -k / self.gap
            yc = y - ya
            ya_a = ya * self.ea
            yc_c = yc * self.ec
            i1 = ya_a * self.e_a + yc_c * self.e_2a_c
            i2 = ya_a * self.e_c + yc_c * self.e_a
            i3 = ya_a * self.e_2c_a + yc_c * self.e_c
            q = b / self.gap
            p = -q
            r = q + y1
            v1 = i1
            v2 = p * i1 + r * i2
            v3 = p * p * i1 + 2.0 * p * r * i2 + r * r * i3

        if self.any_degenerate:
            e0, e1, e2, e3 = self.e_mid
            big_p = y + k * self.dt
            y1sq = y1 * y1
            d1 = self.em * (big_p * e0 - k * e1)
            d2 = self.em * (big_p * y1 * e0 + (big_p * b - k * y1) * e1 - k * b * e2)
            d3 = self.em * (
                big_p * y1sq * e0
                + (2.0 * big_p * y1 * b - k * y1sq) * e1
                + (big_p * b * b - 2.0 * k * y1 * b) * e2
                - k * b * b * e3
            )
            if self.all_degenerate:
                v1, v2, v3 = d1, d2, d3
            else:
                v1 = np.where(self.degenerate, d1, v1)
                v2 = np.where(self.degenerate, d2, v2)
                v3 = np.where(self.degenerate, d3, v3)

        return mean_x, mean_y, v1, v2, v3


def cond_moments(state: FilterState, coeffs: LocalCoeffs, dt: float) -> MomentPair:
    """Conditional mean and covariance of ``(X, Y)`` at ``s + dt`` given ``state``."""
    kernel = MomentKernel(coeffs.a, coeffs.alpha_s, coeffs.c, dt)
    mean_x, mean_y, v1, v2, v3 = kernel.moments(state.x_s, state.y_filt, coeffs.y1_s)
    return MomentPair(
        mean_x=float(mean_x),
        mean_y=float(mean_y),
        v1=float(v1),
        v2=float(v2),
        v3=float(v3),
    )


def predict(state: FilterState, params: FilterParams, dt: float) -> MomentPair:
    """One-step prediction; the covariance is also evaluated at the filtered state."""
    return cond_moments(state, local_coeffs(state, params), dt)


def _update_arrays(
    mean_x: np.ndarray,
    mean_y: np.ndarray,
    v1: np.ndarray,
    v2: np.ndarray,
    x_obs: np.ndarray,
    x_prev: np.ndarray,
    innovation: str,
    y_floor: float,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorised update; returns ``(y, skipped, floored)``."""
    skipped = ~(v1 > V1_MIN)
    innov = x_obs - (mean_x if innovation == "prediction" else x_prev)
    gain = np.where(skipped, 0.0, v2 / np.where(skipped, 1.0, v1))
    raw = mean_y + gain * innov
    floored = raw < y_floor
    return np.maximum(raw, y_floor), skipped, floored


def update(
    pred: MomentPair, x_obs: float, params: FilterParams, x_prev: Optional[float] = None
) -> float:
    """Filtered ``Y`` after observing ``x_obs``.

    Returns ``max(y_floor, mean_y + kappa * innovation)`` with ``kappa = v2 / v1``.
    With ``params.innovation == "increment"`` the innovation is
    ``x_obs - x_prev`` instead of ``x_obs - mean_x``.
    """
    if params.innovation == "increment" and x_prev is None:
        raise ValueError("the increment innovation needs x_prev")
    y, _, _ = _update_arrays(
        np.asarray(pred.mean_x),
        np.asarray(pred.mean_y),
        np.asarray(pred.v1),
        np.asarray(pred.v2),
        np.asarray(x_obs, dtype=float),
        np.asarray(x_prev if x_prev is not None else math.nan, dtype=float),
        params.innovation,
        params.y_floor,
    )
    return float(y)


def advance_y1(y1_s: Any, theta: Any, x_new: Any, x_old: Any) -> Any:
    """``Y1_t = Y1_s + theta (X_t - X_s)``."""
    return y1_s + theta * (x_new - x_old)


def _window_level(
    window: np.ndarray, dt: float, y_floor: float, y1: Any = 0.0
) -> np.ndarray:
    if window.shape[0] < 2:
        raise ValueError("the initial window needs at least 2 values")
    m = window.shape[0] - 1
    qv = np.sum(np.diff(window, axis=0) ** 2, axis=0)
    # The average belongs to the mean left endpoint; move it to the last state.
    shift = window[-1] - np.mean(window[:-1], axis=0)
    return np.maximum(qv / (m * dt) + y1 * shift, y_floor)


def init_state(window: Path, y_floor: float = 1e-12, y1: float = 0.0) -> float:
    """Initial filtered level: squared increments of the window per unit time.

    With a nonzero slope ``y1`` the window average, which estimates ``g`` near the
    mean of the window's left endpoints, is carried linearly to the last observation.
    """
    return float(_window_level(window.values, window.dt, y_floor, y1))


@dataclass(frozen=True)
class RecursionOutput:
    """Arrays produced by :func:`filter_recursion`.

    The trailing shape ``S`` broadcasts the per-path observations and the parameters.
    """

    y_filtered: Optional[np.ndarray]  # (n - L, *S)
    pred_mean_x: Optional[np.ndarray]  # (n - L, *S)
    pred_v1: Optional[np.ndarray]  # (n - L, *S)
    loglik: np.ndarray  # S
    skipped: np.ndarray  # S
    floors: np.ndarray  # S
    y_init: np.ndarray  # S
    steps: int


def filter_recursion(
    values: Any,
    theta: Any,
    alpha: Any,
    beta: Any,
    *,
    dt: float,
    init_window_len: int,
    y1_init: Any = 0.0,
    y_floor: float = 1e-12,
    innovation: str = "prediction",
    keep_series: bool = True,
) -> RecursionOutput:
    """Run predict/update over ``values[init_window_len:]``.

    ``values`` has shape ``(n, ...)`` with time on the first axis. ``theta``,
    ``alpha``, ``beta`` and ``y1_init`` broadcast against ``values.shape[1:]``. The
    log-likelihood accumulates the Gaussian one-step predictive density of each
    observation whose update is not skipped. The initial level is the window's
    :func:`init_state` carried along ``y1_init``.
    """
    values = np.asarray(values, dtype=float)
    n = values.shape[0]
    window_len = init_window_len
    if window_len < 2:
        raise ValueError("init_window_len must be at least 2")
    if n <= window_len:
        raise ValueError(
            f"path of {n} observations is too short for an initial window"
            f" of {window_len}"
        )
    if innovation not in ("prediction", "increment"):
        raise ValueError(f"unknown innovation form: {innovation}")

    theta = np.asarray(theta, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    beta = np.asarray(beta, dtype=float)
    y1_init = np.asarray(y1_init, dtype=float)
    shape = np.broadcast_shapes(
        values.shape[1:], theta.shape, alpha.shape, beta.shape, y1_init.shape
    )

    kernel = MomentKernel(beta, alpha, theta / 2.0, dt)

    y1 = np.array(np.broadcast_to(y1_init, shape))
    y_init = np.broadcast_to(
        _window_level(values[:window_len], dt, y_floor, y1), shape
    )
    y = y_init.copy()
    x_s = np.broadcast_to(values[window_len - 1], shape)

    steps = n - window_len
    loglik = np.zeros(shape)
    skipped_count = np.zeros(shape, dtype=np.int64)
    floor_count = np.zeros(shape, dtype=np.int64)
    if keep_series:
        y_out = np.empty((steps, *shape))
        mx_out = np.empty((steps, *shape))
        v1_out = np.empty((steps, *shape))

    log_2pi = math.log(2.0 * math.pi)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        for j in range(steps):
            x_obs = values[window_len + j]
            mean_x, mean_y, v1, v2, _ = kernel.moments(x_s, y, y1)
            y, skipped, floored = _update_arrays(
                mean_x, mean_y, v1, v2, x_obs, x_s, innovation, y_floor
            )
            resid = x_obs - mean_x
            term = -0.5 * (log_2pi + np.log(v1)) - resid * resid / (2.0 * v1)
            loglik = loglik + np.where(skipped, 0.0, term)
            skipped_count += skipped
            floor_count += floored
            if keep_series:
                y_out[j] = y
                mx_out[j] = mean_x
                v1_out[j] = v1
            y1 = advance_y1(y1, theta, x_obs, x_s)
            x_s = np.broadcast_to(x_obs, shape)

    return RecursionOutput(
        y_filtered=y_out if keep_series else None,
        pred_mean_x=mx_out if keep_series else None,
        pred_v1=v1_out if keep_series else None,
        loglik=loglik,
        skipped=skipped_count,
        floors=floor_count,
        y_init=np.array(y_init),
        steps=steps,
    )


def run_filter(path: Path, params: FilterParams, init_window_len: int) -> FilterResult:
    """Filter one path; the series covers the observations after the initial window."""
    out = filter_recursion(
        path.values,
        params.theta,
        params.alpha_hat,
        params.beta_hat,
        dt=path.dt,
        init_window_len=init_window_len,
        y1_init=params.y1_init,
        y_floor=params.y_floor,
        innovation=params.innovation,
    )
    diagnostics = FilterDiagnostics(
        steps=out.steps,
        skipped_updates=int(out.skipped),
        floor_activations=int(out.floors),
        y_init=float(out.y_init),
    )
    if diagnostics.skipped_updates:
        logger.warning(
            "%d of %d updates skipped for vanishing predicted variance",
            diagnostics.skipped_updates,
            diagnostics.steps,
        )
    if diagnostics.floor_activations:
        logger.debug("filtered state floored %d times", diagnostics.floor_activations)

    series = EstimateSeries(
        dt=path.dt,
        t0=path.t0 + init_window_len * path.dt,
        x=path.values[init_window_len:],
        y_filtered=out.y_filtered,
    )
    return FilterResult(
        series=series,
        diagnostics=diagnostics,
        pred_mean_x=out.pred_mean_x,
        pred_v1=out.pred_v1,
    )
