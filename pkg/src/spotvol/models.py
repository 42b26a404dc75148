import math
from typing import Annotated, Any, Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

# Relative slack when checking that one time step is an integer multiple of another.
GRID_RTOL = 1e-9


def _as_float_array(values: Any, name: str) -> np.ndarray:
    arr = np.array(values, dtype=float)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional")
    arr.setflags(write=False)
    return arr


def integer_ratio(numerator: float, denominator: float) -> Optional[int]:
    """Return ``numerator / denominator`` if it is a positive integer, else None."""
    ratio = numerator / denominator
    nearest = round(ratio)
    if nearest < 1 or abs(ratio - nearest) > GRID_RTOL * max(1.0, abs(ratio)):
        return None
    return int(nearest)


class PowerDiffusion(BaseModel):
    """Diffusion coefficient ``sigma(x) = s0 * x**rho`` evaluated at ``max(x, 0)``."""

    model_config = ConfigDict(frozen=True)

    kind: Literal["power"] = "power"
    s0: float = Field(..., ge=0, description="Scale of the diffusion coefficient")
    rho: float = Field(..., description="Elasticity of the diffusion coefficient")

    def sigma(self, x: Any) -> Any:
        x = np.maximum(x, 0.0)
        if self.rho == 0.5:
            return self.s0 * np.sqrt(x)
        if self.rho == 1.0:
            return self.s0 * x
        if self.rho == 1.5:
            return self.s0 * x * np.sqrt(x)
        return self.s0 * np.power(x, self.rho)

    def g(self, x: Any) -> Any:
        return self.s0**2 * np.power(np.maximum(x, 0.0), 2.0 * self.rho)


class GaussDampedDiffusion(BaseModel):
    """Diffusion coefficient ``sigma(x) = sqrt(x * exp(-x**2))``."""

    model_config = ConfigDict(frozen=True)

    kind: Literal["gauss_damped"] = "gauss_damped"

    def sigma(self, x: Any) -> Any:
        x = np.maximum(x, 0.0)
        return np.sqrt(x * np.exp(-x * x))

    def g(self, x: Any) -> Any:
        x = np.maximum(x, 0.0)
        return x * np.exp(-x * x)


DiffusionSpec = Annotated[
    Union[PowerDiffusion, GaussDampedDiffusion], Field(discriminator="kind")
]


class ModelSpec(BaseModel):
    """Ground-truth diffusion ``dX = (alpha + beta X) dt + sigma(X) dB``."""

    model_config = ConfigDict(frozen=True)

    name: str = Field("custom", description="Label used in tables and file names")
    drift_alpha: float = Field(..., description="Drift intercept")
    drift_beta: float = Field(..., description="Mean-reversion slope")
    diffusion: DiffusionSpec = Field(..., description="Diffusion family")
    x0: float = Field(..., gt=0, description="Initial value of the process")

    def drift(self, x: Any) -> Any:
        return self.drift_alpha + self.drift_beta * x

    def drift_prime(self, x: Any) -> Any:
        return np.zeros_like(np.asarray(x, dtype=float)) + self.drift_beta

    def sigma(self, x: Any) -> Any:
        return self.diffusion.sigma(x)

    def g_true(self, x: Any) -> Any:
        """Spot volatility ``sigma(x)**2``."""
        return self.diffusion.g(x)


class SimConfig(BaseModel):
    """Time grid of a simulated scenario."""

    model_config = ConfigDict(frozen=True)

    gen_dt: float = Field(..., gt=0, description="Data-generating Euler step")
    sample_dt: float = Field(..., gt=0, description="Observation step")
    burn_in_span: float = Field(0.0, ge=0, description="Time discarded before sampling")
    total_span: float = Field(..., gt=0, description="Span of retained observations")
    seed: int = Field(..., ge=0, lt=2**64, description="Root seed of the streams")

    @model_validator(mode="after")
    def validate_grid(self) -> "SimConfig":
        if integer_ratio(self.sample_dt, self.gen_dt) is None:
            raise ValueError("sample_dt must be a positive integer multiple of gen_dt")
        if integer_ratio(self.total_span, self.sample_dt) is None:
            raise ValueError(
                "total_span must be a positive integer multiple of sample_dt"
            )
        burn_steps = integer_ratio(self.burn_in_span, self.gen_dt)
        if self.burn_in_span > 0 and burn_steps is None:
            raise ValueError("burn_in_span must be an integer multiple of gen_dt")
        return self

    @property
    def stride(self) -> int:
        return round(self.sample_dt / self.gen_dt)

    @property
    def n_intervals(self) -> int:
        return round(self.total_span / self.sample_dt)

    @property
    def n_burn_steps(self) -> int:
        return round(self.burn_in_span / self.gen_dt)


class Path(BaseModel):
    """Equidistant observations ``X_{t_0}, ..., X_{t_N}``."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    dt: float = Field(..., gt=0, description="Observation step")
    values: np.ndarray = Field(..., description="Observed values")
    t0: float = Field(0.0, description="Time of the first observation")

    @field_validator("values", mode="before")
    @classmethod
    def validate_values(cls, v: Any) -> np.ndarray:
        arr = _as_float_array(v, "values")
        if arr.size < 2:
            raise ValueError("a path needs at least 2 values")
        if not np.all(np.isfinite(arr)):
            raise ValueError("path values must be finite")
        return arr

    def __len__(self) -> int:
        return int(self.values.size)

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.values.size)

    def segment(self, start: int, stop: Optional[int] = None) -> "Path":
        """Observations ``values[start:stop]`` with their time origin preserved."""
        values = self.values[start:stop]
        first = range(len(self))[start]
        return Path(dt=self.dt, values=values, t0=self.t0 + first * self.dt)


class FilterParams(BaseModel):
    """Estimated drift, nuisance curvature and recursion settings."""

    model_config = ConfigDict(frozen=True)

    theta: float = Field(..., description="Nuisance curvature parameter (global g'')")
    alpha_hat: float = Field(..., description="Estimated drift intercept")
    beta_hat: float = Field(..., description="Estimated drift slope")
    y1_init: float = Field(0.0, description="Initial slope state Y1_0")
    init_slope: Literal["fixed", "local_linear"] = Field(
        "fixed",
        description=(
            "fixed starts from y1_init; local_linear from the kernel slope at the "
            "last window state"
        ),
    )
    y_floor: float = Field(1e-12, gt=0, description="Floor of the filtered state")
    theta_min_abs: float = Field(1e-6, gt=0, description="Smallest admissible |theta|")
    innovation: Literal["prediction", "increment"] = Field(
        "prediction",
        description="Subtract the predicted mean or the last observation",
    )

    @model_validator(mode="after")
    def validate_theta(self) -> "FilterParams":
        if not math.isfinite(self.theta) or abs(self.theta) < self.theta_min_abs:
            raise ValueError(
                f"|theta| must be at least {self.theta_min_abs:g}, got {self.theta!r}"
            )
        return self


class FilterState(BaseModel):
    """State of the recursion after step ``k``."""

    model_config = ConfigDict(frozen=True)

    x_s: float = Field(..., description="Last observation")
    y_filt: float = Field(..., gt=0, description="Filtered spot volatility")
    y1_s: float = Field(0.0, description="Slope state Y1_s")
    k: int = Field(0, ge=0, description="Step index")


class LocalCoeffs(BaseModel):
    """Coefficients of the bilinear system frozen over one observation interval.

    ``p`` and ``q`` are NaN in degenerate mode (``|c - a|`` inside the tolerance band),
    where the moment formulas switch to their ``a = c`` limits.
    """

    model_config = ConfigDict(frozen=True)

    a: float
    alpha_s: float
    b: float
    c: float
    p: float
    q: float
    y1_s: float
    degenerate: bool = False


class MomentPair(BaseModel):
    """One-step conditional mean and covariance of ``(X, Y)``."""

    model_config = ConfigDict(frozen=True)

    mean_x: float
    mean_y: float
    v1: float
    v2: float
    v3: float

    @property
    def covariance(self) -> np.ndarray:
        return np.array([[self.v1, self.v2], [self.v2, self.v3]])


class EstimateSeries(BaseModel):
    """Filtered spot volatility aligned with the observations it was computed at."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    dt: float = Field(..., gt=0)
    t0: float = Field(0.0, description="Time of the first row")
    x: np.ndarray = Field(..., description="Observations")
    y_filtered: np.ndarray = Field(..., description="Filtered spot volatility")

    @field_validator("x", "y_filtered", mode="before")
    @classmethod
    def validate_column(cls, v: Any) -> np.ndarray:
        return _as_float_array(v, "column")

    @model_validator(mode="after")
    def validate_alignment(self) -> "EstimateSeries":
        if self.x.shape != self.y_filtered.shape:
            raise ValueError("x and y_filtered must have the same length")
        return self

    def __len__(self) -> int:
        return int(self.x.size)

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.x.size)


class FilterDiagnostics(BaseModel):
    """Counters reported next to a filtered series."""

    steps: int = Field(0, ge=0, description="Number of predict/update steps")
    skipped_updates: int = Field(0, ge=0, description="Updates skipped, v1 vanished")
    floor_activations: int = Field(0, ge=0, description="Updates clipped at y_floor")
    y_init: float = Field(..., description="Initial filtered state from the window")


class FilterResult(BaseModel):
    """Output of one filter run."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    series: EstimateSeries
    diagnostics: FilterDiagnostics
    pred_mean_x: np.ndarray = Field(..., description="One-step predicted means")
    pred_v1: np.ndarray = Field(..., description="One-step predicted variances of X")


class DriftEstimate(BaseModel):
    """Least-squares estimate of the linear drift."""

    model_config = ConfigDict(frozen=True)

    alpha_hat: float
    beta_hat: float
    residual_ss: float = Field(..., ge=0)

    @field_validator("beta_hat")
    @classmethod
    def validate_nonzero_beta(cls, v: float) -> float:
        if v == 0:
            raise ValueError("beta_hat must be nonzero")
        return v


class ThetaSearchConfig(BaseModel):
    """Grid and refinement settings of the quasi-likelihood search over theta."""

    model_config = ConfigDict(frozen=True)

    theta_min_abs: float = Field(1e-4, gt=0, description="Smallest |theta| on the grid")
    theta_max_abs: float = Field(1e3, description="Largest |theta| on the grid")
    grid_points: int = Field(
        41,
        ge=3,
        description=(
            "Log-spaced magnitudes per sign; the grid holds 2 * grid_points candidates"
        ),
    )
    refine_iters: int = Field(40, ge=0, description="Golden-section iterations")

    @model_validator(mode="after")
    def validate_range(self) -> "ThetaSearchConfig":
        if not self.theta_min_abs < self.theta_max_abs:
            raise ValueError("theta_min_abs must be smaller than theta_max_abs")
        return self


class ThetaEstimate(BaseModel):
    """Result of the theta search on one path."""

    model_config = ConfigDict(frozen=True)

    theta: float
    log_likelihood: float
    grid_best_theta: float
    evaluations: int = Field(..., ge=1)


class KernelConfig(BaseModel):
    """Epanechnikov kernel with bandwidth ``h``."""

    model_config = ConfigDict(frozen=True)

    bandwidth: float = Field(..., gt=0, description="Kernel bandwidth h")
    kernel: Literal["epanechnikov"] = "epanechnikov"


class ExperimentConfig(BaseModel):
    """Everything needed to run one Monte Carlo study on one model."""

    model_config = ConfigDict(frozen=True)

    model: ModelSpec
    sim: SimConfig
    n_paths: int = Field(..., ge=1)
    estimation_len: int = Field(..., ge=3, description="Observations used for fitting")
    evaluation_len: int = Field(..., ge=2, description="Held-out observations")
    init_window_len: int = Field(..., ge=2, description="Initial window length")
    kernel: KernelConfig
    theta_search: ThetaSearchConfig = Field(default_factory=ThetaSearchConfig)
    filter_template: FilterParams = Field(
        default_factory=lambda: FilterParams(theta=1.0, alpha_hat=0.0, beta_hat=0.0),
        description="Recursion settings; theta and drift are replaced per path",
    )
    fixed_theta: Optional[float] = Field(
        None, description="Use this theta instead of the quasi-likelihood search"
    )
    batch_size: int = Field(50, ge=1, description="Paths processed together")
    max_drop_fraction: float = Field(0.05, ge=0, le=1)

    @model_validator(mode="after")
    def validate_lengths(self) -> "ExperimentConfig":
        n_obs = self.sim.n_intervals + 1
        if self.estimation_len + self.evaluation_len > n_obs:
            raise ValueError(
                f"estimation_len + evaluation_len exceeds the {n_obs} simulated observations"
            )
        if self.init_window_len >= self.estimation_len:
            raise ValueError(
                "the initial window must be shorter than the estimation segment"
            )
        return self


class SummaryStats(BaseModel):
    """Mean and sample standard deviation; ``std`` is None for a single value."""

    model_config = ConfigDict(frozen=True)

    mean: float
    std: Optional[float] = Field(None, ge=0)
    n: int = Field(..., ge=1)


class PathOutcome(BaseModel):
    """Per-path result of the out-of-sample study."""

    path_index: int
    rmse_semi: Optional[float] = None
    rmse_ker: Optional[float] = None
    rv_diff_semi: Optional[float] = None
    rv_diff_ker: Optional[float] = None
    theta: Optional[float] = None
    alpha_hat: Optional[float] = None
    beta_hat: Optional[float] = None
    error: Optional[str] = None

    @property
    def failed(self) -> bool:
        return self.error is not None


class TableRow(BaseModel):
    model: str
    method: str
    stats: SummaryStats
    dropped: int = Field(0, ge=0)


class TableResult(BaseModel):
    """Summary rows of one study, in model order then method order."""

    name: str
    rows: list[TableRow] = Field(default_factory=list)
    metadata: dict[str, Any] = Field(default_factory=dict)

    def get_row(self, model: str, method: str) -> TableRow:
        for row in self.rows:
            if row.model == model and row.method == method:
                return row
        raise KeyError(f"no row for ({model}, {method})")


class CurveResult(BaseModel):
    """Volatility-curve recovery at one observation step, rows sorted by ``x``."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    model: str
    dt: float = Field(..., gt=0)
    x: np.ndarray
    g_true: np.ndarray
    y_semi: np.ndarray
    y_local_linear: np.ndarray
    rmse_semi: SummaryStats
    rmse_ker: SummaryStats
    theta: float
    alpha_hat: float
    beta_hat: float
    dropped: int = Field(0, ge=0)


def _power(
    name: str, alpha: float, beta: float, s0: float, rho: float, x0: float
) -> ModelSpec:
    return ModelSpec(
        name=name,
        drift_alpha=alpha,
        drift_beta=beta,
        diffusion=PowerDiffusion(s0=s0, rho=rho),
        x0=x0,
    )


# Short-rate models of the out-of-sample study.
RATE_MODELS: dict[str, ModelSpec] = {
    "lin": _power("lin", 0.184, -0.2146, 0.0783, 0.5, 0.1),
    "quad": _power("quad", 0.0073, -0.1409, 0.2596, 1.0, 0.1),
    "cube": _power("cube", 0.0408, -0.5921, 1.2924, 1.5, 0.1),
    "nlin": _power("nlin", 0.0074, -0.1180, 0.0713, 0.7296, 0.1),
}

# Curve-recovery models: dX = (1 - X) dt + sqrt(v(X)) dB started at 1.
CURVE_MODELS: dict[str, ModelSpec] = {
    "curve1": _power("curve1", 1.0, -1.0, 1.0, 0.5, 1.0),
    "curve2": _power("curve2", 1.0, -1.0, 1.0, 1.0, 1.0),
    "curve3": _power("curve3", 1.0, -1.0, 1.0, 1.5, 1.0),
    "curve4": ModelSpec(
        name="curve4",
        drift_alpha=1.0,
        drift_beta=-1.0,
        diffusion=GaussDampedDiffusion(),
        x0=1.0,
    ),
}

MODEL_PRESETS: dict[str, ModelSpec] = {**RATE_MODELS, **CURVE_MODELS}

BANDWIDTH_PRESETS: dict[str, float] = {
    "curve1": 0.15,
    "curve2": 0.13,
    "curve3": 0.12,
    "curve4": 0.10,
    "lin": 0.15,
    "quad": 0.15,
    "cube": 0.15,
    "nlin": 0.15,
}
