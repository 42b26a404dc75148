"""Test configuration and fixtures."""

import numpy as np
import pytest

from spotvol.config import RunConfig, load_run_config
from spotvol.models import (
    RATE_MODELS,
    FilterParams,
    ModelSpec,
    Path,
    PowerDiffusion,
    SimConfig,
)


@pytest.fixture
def lin_model() -> ModelSpec:
    """Square-root short-rate model."""
    return RATE_MODELS["lin"]


@pytest.fixture
def quad_model() -> ModelSpec:
    """Proportional-volatility short-rate model."""
    return RATE_MODELS["quad"]


@pytest.fixture
def const_vol_model() -> ModelSpec:
    """Mean-reverting model with constant diffusion 0.2, so g == 0.04."""
    return ModelSpec(
        name="const",
        drift_alpha=0.5,
        drift_beta=-5.0,
        diffusion=PowerDiffusion(s0=0.2, rho=0.0),
        x0=0.1,
    )


@pytest.fixture
def small_sim() -> SimConfig:
    """Short scenario on a coarse grid."""
    return SimConfig(
        gen_dt=1e-3, sample_dt=1e-2, burn_in_span=0.0, total_span=1.0, seed=7
    )


@pytest.fixture
def filter_params() -> FilterParams:
    """Filter settings with the quad model's drift."""
    return FilterParams(theta=0.5, alpha_hat=0.0073, beta_hat=-0.1409)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)


@pytest.fixture
def random_path(rng: np.random.Generator) -> Path:
    """Positive random-walk path with 300 observations."""
    steps = rng.normal(0.0, 0.002, size=299)
    return Path(dt=1 / 16000, values=0.1 + np.concatenate(([0.0], np.cumsum(steps))))


@pytest.fixture
def small_run_config() -> RunConfig:
    """Desk-sized configuration for end-to-end experiment runs."""
    return load_run_config(
        overrides=[
            "sim.gen_dt=1/3200",
            "sim.sample_dt=1/1600",
            "sim.burn_in_span=0.0625",
            "sim.total_span=0.25",
            "sim.seed=11",
            "filter.init_window_len=21",
            "theta_search.grid_points=5",
            "theta_search.refine_iters=5",
            "experiment.n_paths=2",
            "experiment.estimation_len=200",
            "experiment.evaluation_len=200",
            "experiment.batch_size=2",
            "experiment.workers=1",
            "experiment.curve_dts=1/400,1/800,1/1600",
            "experiment.curve_gen_dt=1/3200",
            "experiment.curve_burn_in_span=0",
            "experiment.curve_total_span=0.25",
            "experiment.init_window_span=1/80",
        ]
    )
