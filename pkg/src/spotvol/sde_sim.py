"""Euler simulation of ``dX = mu(X) dt + sigma(X) dB`` and observation sampling.

The diffusion coefficient is evaluated at ``max(X, 0)`` (full truncation), so the
square-root and power families stay defined when an Euler step crosses zero.

Random numbers come from one counter-based ``Philox`` stream per path, keyed by
``(seed, path_index)``: a path is reproduced exactly whether it is simulated alone,
inside a batch, or on another worker.
"""

import logging
from collections.abc import Sequence

import numpy as np

from .errors import PathDivergedError
from .models import ModelSpec, Path, SimConfig

logger = logging.getLogger(__name__)

# Euler steps drawn and integrated per block in batch simulation.
BLOCK_STEPS = 4096


def rng_stream(seed: int, path_index: int = 0) -> np.random.Generator:
    """Independent random stream for one Monte Carlo path."""
    if path_index < 0:
        raise ValueError("path_index must be non-negative")
    sequence = np.random.SeedSequence(entropy=seed, spawn_key=(path_index,))
    return np.random.Generator(np.random.Philox(sequence))


def scenario_layout(config: SimConfig) -> tuple[int, int, int]:
    """Return ``(n_gen_steps, stride, n_burn_steps)`` of a scenario."""
    stride = config.stride
    n_burn = config.n_burn_steps
    return n_burn + stride * config.n_intervals, stride, n_burn


def _euler_block(
    x: np.ndarray, model: ModelSpec, gen_dt: float, normals: np.ndarray
) -> np.ndarray:
    """Advance ``x`` (one entry per path) over ``normals.shape[0]`` Euler steps.

    Returns the trajectory after each step, shape ``normals.shape``.
    """
    shift = model.drift_alpha * gen_dt
    decay = 1.0 + model.drift_beta * gen_dt
    sigma = model.diffusion.sigma
    out = np.empty_like(normals)
    with np.errstate(over="ignore", invalid="ignore"):
        shocks = normals * np.sqrt(gen_dt)
        for j in range(normals.shape[0]):
            x = shift + decay * x + sigma(x) * shocks[j]
            out[j] = x
    return out


def _first_nonfinite(trajectory: np.ndarray) -> int:
    return int(np.argmax(~np.isfinite(trajectory)))


def euler_simulate(
    model: ModelSpec, gen_dt: float, n_steps: int, rng: np.random.Generator
) -> Path:
    """Simulate ``n_steps`` Euler steps from ``model.x0`` (``n_steps + 1`` values)."""
    if gen_dt <= 0:
        raise ValueError("gen_dt must be positive")
    if n_steps < 1:
        raise ValueError("n_steps must be at least 1")

    normals = rng.standard_normal(n_steps)
    trajectory = _euler_block(
        np.array([model.x0]), model, gen_dt, normals.reshape(n_steps, 1)
    )[:, 0]
    if not np.all(np.isfinite(trajectory)):
        raise PathDivergedError(_first_nonfinite(trajectory) + 1)
    return Path(dt=gen_dt, values=np.concatenate(([model.x0], trajectory)))


def subsample(path: Path, stride: int) -> Path:
    """Keep observations ``0, stride, 2*stride, ...``."""
    if stride < 1:
        raise ValueError(f"stride must be at least 1, got {stride}")
    values = path.values[::stride]
    if values.size < 2:
        raise ValueError("stride leaves fewer than 2 observations")
    return Path(dt=path.dt * stride, values=values, t0=path.t0)


def simulate_batch(
    model: ModelSpec, config: SimConfig, path_indices: Sequence[int]
) -> tuple[np.ndarray, np.ndarray]:
    """Simulate several scenarios in lock-step.

    Returns ``(values, diverged_at)``: ``values`` has shape ``(n_obs, n_paths)`` with
    the burn-in removed and the fine grid subsampled; ``diverged_at[i]`` is the first
    Euler step with a non-finite value on path ``i``, or -1.
    """
    n_total, stride, n_burn = scenario_layout(config)
    n_paths = len(path_indices)
    streams = [rng_stream(config.seed, i) for i in path_indices]

    n_obs = config.n_intervals + 1
    values = np.empty((n_obs, n_paths))
    diverged_at = np.full(n_paths, -1, dtype=np.int64)

    x = np.full(n_paths, model.x0, dtype=float)
    if n_burn == 0:
        values[0] = x
    step = 0
    while step < n_total:
        block = min(BLOCK_STEPS, n_total - step)
        normals = np.stack([s.standard_normal(block) for s in streams], axis=1)
        trajectory = _euler_block(x, model, config.gen_dt, normals)
        x = trajectory[-1]

        bad = ~np.isfinite(trajectory)
        newly = bad.any(axis=0) & (diverged_at < 0)
        for i in np.flatnonzero(newly):
            diverged_at[i] = step + 1 + _first_nonfinite(trajectory[:, i])

        # Fine-grid steps step+1 .. step+block; keep those on the observation grid.
        steps = np.arange(step + 1, step + block + 1)
        keep = (steps >= n_burn) & ((steps - n_burn) % stride == 0)
        obs_index = (steps[keep] - n_burn) // stride
        values[obs_index] = trajectory[keep]
        step += block

    if np.any(diverged_at >= 0):
        logger.debug(
            "%d of %d paths diverged for model %s",
            int(np.sum(diverged_at >= 0)),
            n_paths,
            model.name,
        )
    return values, diverged_at


def generate_scenario(model: ModelSpec, config: SimConfig, path_index: int = 0) -> Path:
    """Simulate burn-in plus the retained span, then sample at ``config.sample_dt``."""
    values, diverged_at = simulate_batch(model, config, [path_index])
    if diverged_at[0] >= 0:
        raise PathDivergedError(int(diverged_at[0]), path_index)
    return Path(dt=config.sample_dt, values=values[:, 0])
