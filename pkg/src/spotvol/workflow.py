import logging
import os
from collections.abc import Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from itertools import repeat
from pathlib import Path as FilePath
from typing import Any, Callable, Optional, TypeVar, Union

import numpy as np

from .baselines import (
    integrated_vol,
    local_linear_estimates,
    local_linear_series,
    local_linear_slopes,
    realized_vol,
    rmse,
)
from .config import RunConfig
from .errors import (
    ExperimentFailedError,
    LikelihoodUndefinedError,
    PathDivergedError,
    SpotVolError,
)
from .estimation import drift_lse, theta_qmle, theta_qmle_batch
from .models import (
    CurveResult,
    ExperimentConfig,
    FilterParams,
    KernelConfig,
    ModelSpec,
    Path,
    PathOutcome,
    SimConfig,
    SummaryStats,
    TableResult,
    TableRow,
    ThetaSearchConfig,
    integer_ratio,
)
from .output_formatter import OutputFormatter
from .sde_sim import generate_scenario, simulate_batch
from .volfilter import filter_recursion, run_filter

logger = logging.getLogger(__name__)

SEMI = "semi"
KER = "ker"

INIT_WINDOW_NOTE = (
    "curve study: the initial window is the first init_window_span of the retained "
    "span; curve rows start after it"
)
SHARED_THETA_NOTE = (
    "curve study: theta is estimated at the coarsest step and reused at the finer ones"
)

T = TypeVar("T")
R = TypeVar("R")


def summarize(values: Sequence[float]) -> SummaryStats:
    """Mean and sample standard deviation (n - 1 denominator) in input order."""
    arr = np.asarray(values, dtype=float)
    if arr.size == 0:
        raise ValueError("cannot summarize an empty sequence")
    std = float(np.std(arr, ddof=1)) if arr.size > 1 else None
    return SummaryStats(mean=float(np.mean(arr)), std=std, n=int(arr.size))


@dataclass
class BatchFit:
    """Drift, theta and filtered series for the columns of one simulated batch."""

    alpha: np.ndarray
    beta: np.ndarray
    theta: np.ndarray
    errors: list[Optional[str]]
    y1_init: np.ndarray
    # (n_obs - filter_start - init_window_len, n_paths), NaN for failed paths
    y_filtered: np.ndarray


def initial_slopes(
    values: np.ndarray,
    dt: float,
    fit_len: int,
    at: int,
    kernel: KernelConfig,
    columns: Sequence[int],
) -> np.ndarray:
    """Kernel slope of ``g`` at ``values[at]`` fitted on ``values[:fit_len]``.

    Zero for columns not listed and where the kernel fit fails.
    """
    slopes = np.zeros(values.shape[1])
    for i in columns:
        est = values[:fit_len, i]
        z = np.diff(est) ** 2 / dt
        slopes[i] = local_linear_slopes(est[:-1], z, [values[at, i]], kernel)[0]
    return np.where(np.isfinite(slopes), slopes, 0.0)


def fit_and_filter(
    values: np.ndarray,
    dt: float,
    fit_len: int,
    init_window_len: int,
    template: FilterParams,
    search: ThetaSearchConfig,
    fixed_theta: Any,
    errors: Optional[list[Optional[str]]] = None,
    *,
    kernel: Optional[KernelConfig] = None,
    filter_start: int = 0,
) -> BatchFit:
    """Estimate drift and theta on ``values[:fit_len]``, then filter every column.

    The filter runs over ``values[filter_start:]`` with its initial window at the
    front. ``fixed_theta``, a scalar or one value per column, skips the search. With
    a ``kernel`` and ``template.init_slope == "local_linear"`` each recursion starts
    from the local linear slope at the last state of its initial window.
    """
    n_obs, n_paths = values.shape
    if not 0 <= filter_start <= n_obs - init_window_len - 1:
        raise ValueError(f"filter_start {filter_start} leaves no step to filter")
    errors = list(errors) if errors is not None else [None] * n_paths
    alpha = np.full(n_paths, np.nan)
    beta = np.full(n_paths, np.nan)
    theta = np.full(n_paths, np.nan)

    drifts = {}
    for i in range(n_paths):
        if errors[i] is not None:
            continue
        try:
            drifts[i] = drift_lse(Path(dt=dt, values=values[:fit_len, i]))
        except SpotVolError as e:
            errors[i] = str(e)
            continue
        alpha[i] = drifts[i].alpha_hat
        beta[i] = drifts[i].beta_hat

    fitted = sorted(drifts)
    y1_fit = np.full(n_paths, template.y1_init)
    y1_filter = np.full(n_paths, template.y1_init)
    if kernel is not None and template.init_slope == "local_linear":
        last = init_window_len - 1
        y1_fit = initial_slopes(values, dt, fit_len, last, kernel, fitted)
        y1_filter = initial_slopes(
            values, dt, fit_len, filter_start + last, kernel, fitted
        )

    if fixed_theta is not None:
        given = np.broadcast_to(np.asarray(fixed_theta, dtype=float), (n_paths,))
        theta[fitted] = given[fitted]
    elif fitted:
        estimates = theta_qmle_batch(
            values[:fit_len, fitted],
            dt,
            [drifts[i] for i in fitted],
            search,
            init_window_len,
            template,
            y1_init=y1_fit[fitted],
        )
        for i, estimate in zip(fitted, estimates):
            if estimate is None:
                reason = "no theta candidate gives a defined likelihood"
                errors[i] = str(LikelihoodUndefinedError(reason))
            else:
                theta[i] = estimate.theta

    y_filtered = np.full((n_obs - filter_start - init_window_len, n_paths), np.nan)
    ok = [i for i in range(n_paths) if errors[i] is None]
    if ok:
        out = filter_recursion(
            values[filter_start:, ok],
            theta[ok],
            alpha[ok],
            beta[ok],
            dt=dt,
            init_window_len=init_window_len,
            y1_init=y1_filter[ok],
            y_floor=template.y_floor,
            innovation=template.innovation,
        )
        y_filtered[:, ok] = out.y_filtered
    return BatchFit(
        alpha=alpha,
        beta=beta,
        theta=theta,
        errors=errors,
        y1_init=y1_filter,
        y_filtered=y_filtered,
    )


def _divergence_errors(
    diverged_at: np.ndarray, path_indices: Sequence[int]
) -> list[Optional[str]]:
    return [
        str(PathDivergedError(int(step), index)) if step >= 0 else None
        for step, index in zip(diverged_at, path_indices)
    ]


def _finite_or_none(value: float) -> Optional[float]:
    return float(value) if np.isfinite(value) else None


def evaluate_batch(
    exp: ExperimentConfig, path_indices: Sequence[int]
) -> list[PathOutcome]:
    """Out-of-sample study on a batch of paths.

    Drift and theta are fitted on the first ``estimation_len`` observations. The
    filter starts from the ``init_window_len`` observations just before the last
    ``evaluation_len``, on which both methods are scored.
    """
    values, diverged_at = simulate_batch(exp.model, exp.sim, path_indices)
    dt = exp.sim.sample_dt
    window = exp.init_window_len
    eval_start = values.shape[0] - exp.evaluation_len
    fit = fit_and_filter(
        values,
        dt,
        exp.estimation_len,
        window,
        exp.filter_template,
        exp.theta_search,
        exp.fixed_theta,
        _divergence_errors(diverged_at, path_indices),
        kernel=exp.kernel,
        filter_start=eval_start - window,
    )

    outcomes = []
    for i, index in enumerate(path_indices):
        if fit.errors[i] is not None:
            outcomes.append(PathOutcome(path_index=index, error=fit.errors[i]))
            continue

        est = values[: exp.estimation_len, i]
        held = values[eval_start:, i]
        truth = exp.model.g_true(held)
        semi = fit.y_filtered[:, i]
        ker = local_linear_estimates(est[:-1], np.diff(est) ** 2 / dt, held, exp.kernel)

        try:
            rmse_ker: Optional[float] = rmse(ker, truth)
        except ValueError:
            rmse_ker = None
        realized = realized_vol(Path(dt=dt, values=held))
        outcomes.append(
            PathOutcome(
                path_index=index,
                rmse_semi=rmse(semi, truth),
                rmse_ker=rmse_ker,
                rv_diff_semi=_finite_or_none(realized - integrated_vol(semi, dt)),
                rv_diff_ker=_finite_or_none(realized - integrated_vol(ker, dt)),
                theta=float(fit.theta[i]),
                alpha_hat=float(fit.alpha[i]),
                beta_hat=float(fit.beta[i]),
            )
        )
    return outcomes


@dataclass(frozen=True)
class CurveStudy:
    """Curve study settings for one model; every observation step shares one path."""

    model: ModelSpec
    sim: SimConfig
    dts: tuple[float, ...]
    init_window_span: float
    template: FilterParams
    search: ThetaSearchConfig
    fixed_theta: Optional[float]
    kernel: KernelConfig
    share_theta: bool = True


@dataclass
class CurvePath:
    path_index: int
    error: Optional[str] = None
    x: np.ndarray = field(default_factory=lambda: np.empty(0))
    y_semi: np.ndarray = field(default_factory=lambda: np.empty(0))
    y_local_linear: np.ndarray = field(default_factory=lambda: np.empty(0))
    rmse_semi: Optional[float] = None
    rmse_ker: Optional[float] = None
    theta: float = np.nan
    alpha_hat: float = np.nan
    beta_hat: float = np.nan


def evaluate_curve_batch(
    study: CurveStudy, path_indices: Sequence[int]
) -> list[list[CurvePath]]:
    """In-sample curve recovery on a batch of paths, one list per observation step.

    ``study.dts`` runs from the coarsest step to the finest. With ``share_theta`` the
    theta found at the coarsest step is reused at the others.
    """
    values, diverged_at = simulate_batch(study.model, study.sim, path_indices)
    base_dt = study.sim.sample_dt
    errors = _divergence_errors(diverged_at, path_indices)
    theta: Any = study.fixed_theta
    per_dt = []
    for dt in study.dts:
        stride = integer_ratio(dt, base_dt)
        sampled = values[::stride]
        window = integer_ratio(study.init_window_span, dt) + 1
        fit = fit_and_filter(
            sampled,
            dt,
            sampled.shape[0],
            window,
            study.template,
            study.search,
            theta,
            errors,
            kernel=study.kernel,
        )
        if theta is None and study.share_theta:
            theta, errors = fit.theta, fit.errors
        results = []
        for i, index in enumerate(path_indices):
            if fit.errors[i] is not None:
                results.append(CurvePath(path_index=index, error=fit.errors[i]))
                continue
            column = sampled[:, i]
            x = column[window:]
            truth = study.model.g_true(x)
            semi = fit.y_filtered[:, i]
            ker = local_linear_series(Path(dt=dt, values=column), x, study.kernel)
            try:
                rmse_ker: Optional[float] = rmse(ker, truth)
            except ValueError:
                rmse_ker = None
            results.append(
                CurvePath(
                    path_index=index,
                    x=x,
                    y_semi=semi,
                    y_local_linear=ker,
                    rmse_semi=rmse(semi, truth),
                    rmse_ker=rmse_ker,
                    theta=float(fit.theta[i]),
                    alpha_hat=float(fit.alpha[i]),
                    beta_hat=float(fit.beta[i]),
                )
            )
        per_dt.append(results)
    return per_dt


class ExperimentWorkflow:
    """Orchestrates simulation, filtering and the Monte Carlo studies of one run."""

    def __init__(self, config: RunConfig):
        self.config = config
        self.workers = config.experiment.workers or os.cpu_count() or 1
        self.output_formatter = OutputFormatter()

    def _map_batches(
        self, func: Callable[[T, list[int]], R], task: T, n_paths: int, batch_size: int
    ) -> list[R]:
        """Run ``func(task, batch)`` over fixed batches of path indices, in order."""
        batches = [
            list(range(start, min(start + batch_size, n_paths)))
            for start in range(0, n_paths, batch_size)
        ]
        workers = min(self.workers, len(batches))
        if workers <= 1:
            return [func(task, batch) for batch in batches]
        logger.debug("running %d batches on %d workers", len(batches), workers)
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(func, repeat(task), batches))

    def run_paths(self, exp: ExperimentConfig) -> list[PathOutcome]:
        """Evaluate every path of an out-of-sample study."""
        if exp.fixed_theta is not None:
            FilterParams(
                **{**exp.filter_template.model_dump(), "theta": exp.fixed_theta}
            )

        logger.info("model %s: evaluating %d paths", exp.model.name, exp.n_paths)
        batches = self._map_batches(evaluate_batch, exp, exp.n_paths, exp.batch_size)
        outcomes = [outcome for batch in batches for outcome in batch]

        failed = [o for o in outcomes if o.failed]
        for outcome in failed:
            logger.warning(
                "model %s: dropped path %d: %s",
                exp.model.name,
                outcome.path_index,
                outcome.error,
            )
        if len(failed) > exp.max_drop_fraction * exp.n_paths:
            raise ExperimentFailedError(
                exp.model.name, len(failed), exp.n_paths, failed[0].error or ""
            )
        return outcomes

    def _table_rows(
        self, exp: ExperimentConfig, outcomes: list[PathOutcome], fields: dict[str, str]
    ) -> list[TableRow]:
        rows = []
        for method, attr in fields.items():
            values = [v for v in (getattr(o, attr) for o in outcomes) if v is not None]
            dropped = exp.n_paths - len(values)
            if not values or dropped > exp.max_drop_fraction * exp.n_paths:
                first = next((o.error for o in outcomes if o.failed), None)
                raise ExperimentFailedError(
                    exp.model.name,
                    dropped,
                    exp.n_paths,
                    first or f"{method} estimate missing",
                )
            stats = summarize(values)
            logger.info(
                "model %s, %s: mean %.4e over %d paths",
                exp.model.name,
                method,
                stats.mean,
                stats.n,
            )
            row = TableRow(
                model=exp.model.name, method=method, stats=stats, dropped=dropped
            )
            rows.append(row)
        return rows

    def run_tables(self) -> tuple[TableResult, TableResult]:
        """Out-of-sample RMSE table and realized-minus-integrated volatility table."""
        table1 = TableResult(name="table1")
        table2 = TableResult(name="table2")
        dropped: dict[str, int] = {}
        first_errors: dict[str, str] = {}
        for model in self.config.table_models():
            exp = self.config.experiment_config(model)
            outcomes = self.run_paths(exp)
            table1.rows.extend(
                self._table_rows(exp, outcomes, {SEMI: "rmse_semi", KER: "rmse_ker"})
            )
            table2.rows.extend(
                self._table_rows(
                    exp, outcomes, {SEMI: "rv_diff_semi", KER: "rv_diff_ker"}
                )
            )
            failed = [o for o in outcomes if o.failed]
            dropped[model.name] = len(failed)
            if failed:
                first_errors[model.name] = failed[0].error or ""

        metadata = {
            "seed": self.config.require_seed(),
            "n_paths": self.config.experiment.n_paths,
            "dropped_paths": dropped,
            "first_errors": first_errors,
        }
        table1.metadata.update(metadata)
        table2.metadata.update(metadata)
        return table1, table2

    def run_table1(self) -> TableResult:
        return self.run_tables()[0]

    def run_table2(self) -> TableResult:
        return self.run_tables()[1]

    def curve_study(self, model: ModelSpec) -> CurveStudy:
        exp = self.config.experiment
        dts = tuple(sorted(exp.curve_dts, reverse=True))
        if not dts:
            raise ValueError("experiment.curve_dts is empty")
        base_dt = dts[-1]
        for dt in dts:
            if integer_ratio(dt, base_dt) is None:
                raise ValueError(
                    f"curve step {dt:g} is not a multiple of the finest step {base_dt:g}"
                )
            if integer_ratio(exp.init_window_span, dt) is None:
                raise ValueError(
                    f"init_window_span must be a multiple of the curve step {dt:g}"
                )
            if integer_ratio(exp.curve_total_span, dt) is None:
                raise ValueError(
                    f"curve_total_span must be a multiple of the curve step {dt:g}"
                )
        if exp.init_window_span >= exp.curve_total_span:
            raise ValueError("the initial window must be shorter than curve_total_span")

        fixed_theta = self.config.filter.theta
        template = self.config.filter_params(
            1.0 if fixed_theta is None else fixed_theta, 0.0, 0.0
        )
        return CurveStudy(
            model=model,
            sim=SimConfig(
                gen_dt=exp.curve_gen_dt,
                sample_dt=base_dt,
                burn_in_span=exp.curve_burn_in_span,
                total_span=exp.curve_total_span,
                seed=self.config.require_seed(),
            ),
            dts=dts,
            init_window_span=exp.init_window_span,
            template=template,
            search=self.config.theta_search_config(),
            fixed_theta=fixed_theta,
            kernel=self.config.kernel_config(model.name),
            share_theta=exp.curve_share_theta,
        )

    def run_curves(self) -> list[CurveResult]:
        """Volatility-curve recovery per model and observation step.

        The rows come from path 0; the RMSE summaries average over ``curve_paths``.
        """
        n_paths = self.config.experiment.curve_paths
        curves = []
        for model in self.config.curve_models():
            study = self.curve_study(model)
            logger.info("model %s: curve study over %d path(s)", model.name, n_paths)
            batches = self._map_batches(
                evaluate_curve_batch, study, n_paths, self.config.experiment.batch_size
            )
            for k, dt in enumerate(study.dts):
                paths = [p for batch in batches for p in batch[k]]
                curves.append(self._curve_result(model, dt, paths))
        return curves

    def _curve_result(
        self, model: ModelSpec, dt: float, paths: list[CurvePath]
    ) -> CurveResult:
        failed = [p for p in paths if p.error is not None]
        for p in failed:
            logger.warning(
                "model %s, dt %g: dropped path %d: %s",
                model.name,
                dt,
                p.path_index,
                p.error,
            )
        ker_values = [p.rmse_ker for p in paths if p.rmse_ker is not None]
        dropped = len(paths) - len(ker_values)
        limit = self.config.experiment.max_drop_fraction * len(paths)
        if not ker_values or dropped > limit:
            first = failed[0].error if failed else "local linear estimate missing"
            raise ExperimentFailedError(model.name, dropped, len(paths), first or "")

        first_ok = next(p for p in paths if p.error is None)
        order = np.argsort(first_ok.x, kind="stable")
        semi_values = [p.rmse_semi for p in paths if p.rmse_semi is not None]
        return CurveResult(
            model=model.name,
            dt=dt,
            x=first_ok.x[order],
            g_true=model.g_true(first_ok.x[order]),
            y_semi=first_ok.y_semi[order],
            y_local_linear=first_ok.y_local_linear[order],
            rmse_semi=summarize(semi_values),
            rmse_ker=summarize(ker_values),
            theta=first_ok.theta,
            alpha_hat=first_ok.alpha_hat,
            beta_hat=first_ok.beta_hat,
            dropped=dropped,
        )

    def _manifest_config(self) -> dict[str, Any]:
        return self.config.model_dump(mode="json")

    def simulate(self, out_path: Union[str, FilePath]) -> dict[str, Any]:
        """Simulate one scenario and write it as a path CSV."""
        model = self.config.model_spec()
        sim = self.config.sim_config()
        path = generate_scenario(model, sim)
        logger.info("simulated %d observations of model %s", len(path), model.name)
        file_paths = {
            "path": self.output_formatter.write_path_csv(path, out_path),
            "manifest": self.output_formatter.write_manifest(
                _sibling(out_path, ".manifest.json"),
                "simulate",
                self._manifest_config(),
                {"model": model.model_dump(), "observations": len(path)},
            ),
        }
        return {"path": path, "file_paths": file_paths}

    def filter_file(
        self, in_path: Union[str, FilePath], out_path: Union[str, FilePath]
    ) -> dict[str, Any]:
        """Estimate drift and theta on a path CSV, filter it and write the estimates."""
        path = self.output_formatter.read_path_csv(in_path)
        window = self.config.filter.init_window_len
        if len(path) <= window:
            raise ValueError(
                f"input has {len(path)} observations, "
                f"not more than the initial window of {window}"
            )

        drift = drift_lse(path)
        seed = {}
        if self.config.filter.init_slope == "local_linear":
            kernel = self.config.kernel_config(self.config.model.preset or "")
            column = path.values[:, None]
            slope = initial_slopes(column, path.dt, len(path), window - 1, kernel, [0])
            seed["y1_init"] = float(slope[0])
        theta = self.config.filter.theta
        if theta is None:
            template = self.config.filter_params(1.0, drift.alpha_hat, drift.beta_hat)
            template = template.model_copy(update=seed)
            search = self.config.theta_search_config()
            theta = theta_qmle(path, drift, search, window, template)
        params = self.config.filter_params(theta, drift.alpha_hat, drift.beta_hat)
        params = params.model_copy(update=seed)
        logger.info(
            "alpha_hat=%.6g beta_hat=%.6g theta=%.6g y1_init=%.6g",
            params.alpha_hat,
            params.beta_hat,
            params.theta,
            params.y1_init,
        )
        result = run_filter(path, params, window)

        estimates = {
            "alpha_hat": params.alpha_hat,
            "beta_hat": params.beta_hat,
            "theta": params.theta,
            "y1_init": params.y1_init,
        }
        formatter = self.output_formatter
        file_paths = {
            "estimates": formatter.write_estimate_csv(result.series, out_path),
            "diagnostics": formatter.write_diagnostics(
                result.diagnostics, f"{out_path}.diagnostics.txt", estimates
            ),
            "manifest": formatter.write_manifest(
                _sibling(out_path, ".manifest.json"),
                "filter",
                self._manifest_config(),
                {"input": str(in_path), "estimates": estimates},
            ),
        }
        return {"result": result, "params": params, "file_paths": file_paths}

    def local_linear_file(
        self, in_path: Union[str, FilePath], out_path: Union[str, FilePath]
    ) -> dict[str, Any]:
        """Local linear volatility at every observation but the last of a path CSV."""
        path = self.output_formatter.read_path_csv(in_path)
        kernel = self.config.kernel_config(self.config.model.preset or "")
        x = path.values[:-1]
        estimates = local_linear_series(path, x, kernel)
        missing = int(np.isnan(estimates).sum())
        if missing:
            logger.warning(
                "local linear estimate missing at %d of %d points", missing, x.size
            )
        file_paths = {
            "estimates": self.output_formatter.write_spot_csv(
                path.times[:-1], x, estimates, out_path
            )
        }
        return {"estimates": estimates, "missing": missing, "file_paths": file_paths}

    def save_tables(self, which: str, out_dir: Union[str, FilePath]) -> dict[str, Any]:
        """Run the out-of-sample study; write one table with manifest and report."""
        if which not in ("table1", "table2"):
            raise ValueError(f"unknown table: {which}")
        table1, table2 = self.run_tables()
        table = table1 if which == "table1" else table2
        out = FilePath(out_dir)
        formatter = self.output_formatter
        file_paths = {
            "table": formatter.write_table_csv(table, out / f"{which}.csv"),
            "manifest": formatter.write_manifest(
                out / "manifest.json",
                which,
                self._manifest_config(),
                {"metadata": table.metadata},
            ),
            "report": formatter.write_report(out / "report.md", [table]),
        }
        return {"table": table, "file_paths": file_paths}

    def save_curves(self, out_dir: Union[str, FilePath]) -> dict[str, Any]:
        """Run the curve study; one CSV per model and step plus an RMSE summary."""
        curves = self.run_curves()
        out = FilePath(out_dir)
        formatter = self.output_formatter
        file_paths: dict[str, str] = {}
        for curve in curves:
            name = f"curves_{curve.model}_dt{round(1 / curve.dt)}"
            file_paths[name] = formatter.write_curves_csv(curve, out / f"{name}.csv")
        file_paths["summary"] = formatter.write_curve_summary_csv(
            curves, out / "curves_rmse.csv"
        )
        details = {
            "init_window": INIT_WINDOW_NOTE,
            "theta": (
                SHARED_THETA_NOTE
                if self.config.experiment.curve_share_theta
                else "curve study: theta is estimated at every step"
            ),
            "curves": [
                {
                    "model": c.model,
                    "dt": c.dt,
                    "theta": c.theta,
                    "alpha_hat": c.alpha_hat,
                    "beta_hat": c.beta_hat,
                    "dropped": c.dropped,
                }
                for c in curves
            ],
        }
        file_paths["manifest"] = formatter.write_manifest(
            out / "manifest.json", "curves", self._manifest_config(), details
        )
        file_paths["report"] = formatter.write_report(out / "report.md", [], curves)
        return {"curves": curves, "file_paths": file_paths}


def _sibling(path: Union[str, FilePath], suffix: str) -> FilePath:
    """``dir/name.csv`` -> ``dir/name<suffix>``."""
    p = FilePath(path)
    return p.with_name(p.stem + suffix)
