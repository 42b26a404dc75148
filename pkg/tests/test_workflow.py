"""Test cases for ExperimentWorkflow functionality."""

import json
import logging
import math

import numpy as np
import pandas as pd
import pytest

from spotvol.baselines import integrated_vol, local_linear_slopes, realized_vol, rmse
from spotvol.config import load_run_config
from spotvol.errors import ExperimentFailedError
from spotvol.models import (
    CURVE_MODELS,
    RATE_MODELS,
    KernelConfig,
    Path,
    PathOutcome,
    SimConfig,
    ThetaSearchConfig,
)
from spotvol.sde_sim import simulate_batch
from spotvol.volfilter import filter_recursion
from spotvol.workflow import (
    ExperimentWorkflow,
    evaluate_batch,
    fit_and_filter,
    summarize,
)


def _outcome(index: int, error=None, **values) -> PathOutcome:
    if error is not None:
        return PathOutcome(path_index=index, error=error)
    fields = dict(
        rmse_semi=1e-4 * (index + 1),
        rmse_ker=2e-4 * (index + 1),
        rv_diff_semi=1e-5,
        rv_diff_ker=2e-5,
        theta=0.5,
        alpha_hat=0.01,
        beta_hat=-0.2,
    )
    fields.update(values)
    return PathOutcome(path_index=index, **fields)


def _search() -> ThetaSearchConfig:
    return ThetaSearchConfig(grid_points=3, refine_iters=3)


@pytest.fixture
def workflow(small_run_config):
    """Create an ExperimentWorkflow on the desk-sized configuration."""
    return ExperimentWorkflow(small_run_config)


class TestSummarize:
    """Test mean and standard deviation aggregation."""

    def test_constant(self):
        stats = summarize([1.0, 1.0, 1.0])
        assert stats.mean == 1.0
        assert stats.std == 0.0
        assert stats.n == 3

    def test_two_values(self):
        stats = summarize([0.0, 2.0])
        assert stats.mean == 1.0
        assert stats.std == pytest.approx(math.sqrt(2.0))

    def test_single_value_has_no_std(self):
        stats = summarize([3.5])
        assert stats.mean == 3.5
        assert stats.std is None

    def test_empty(self):
        with pytest.raises(ValueError):
            summarize([])

    def test_matches_two_pass_oracle(self, rng):
        values = rng.uniform(size=1_000_000)
        mean = math.fsum(values) / values.size
        var = math.fsum((v - mean) ** 2 for v in values) / (values.size - 1)
        stats = summarize(values)
        assert stats.mean == pytest.approx(mean, rel=1e-9)
        assert stats.std == pytest.approx(math.sqrt(var), rel=1e-9)


class TestFitAndFilter:
    """Test the batched fit of drift and theta followed by filtering."""

    def test_failed_columns_are_skipped(
        self, const_vol_model, small_sim, filter_params
    ):
        values, _ = simulate_batch(const_vol_model, small_sim, [0, 1])
        values[:, 1] = 0.3
        fit = fit_and_filter(
            values, small_sim.sample_dt, 50, 11, filter_params, _search(), None
        )
        assert fit.errors[0] is None
        assert "drift not identified" in fit.errors[1]
        assert np.all(np.isnan(fit.y_filtered[:, 1]))
        assert np.all(fit.y_filtered[:, 0] > 0)
        assert fit.y_filtered.shape == (101 - 11, 2)

    def test_fixed_theta(self, const_vol_model, small_sim, filter_params):
        values, _ = simulate_batch(const_vol_model, small_sim, [0, 1])
        fit = fit_and_filter(
            values, small_sim.sample_dt, 50, 11, filter_params, _search(), 0.25
        )
        np.testing.assert_array_equal(fit.theta, [0.25, 0.25])

    def test_preset_errors_kept(self, const_vol_model, small_sim, filter_params):
        values, _ = simulate_batch(const_vol_model, small_sim, [0, 1])
        fit = fit_and_filter(
            values,
            small_sim.sample_dt,
            50,
            11,
            filter_params,
            _search(),
            0.25,
            errors=["path diverged at step 3", None],
        )
        assert fit.errors[0] == "path diverged at step 3"
        assert np.isnan(fit.alpha[0])
        assert np.isfinite(fit.alpha[1])

    def test_filter_start_moves_the_window(
        self, const_vol_model, small_sim, filter_params
    ):
        values, _ = simulate_batch(const_vol_model, small_sim, [0, 1])
        fit = fit_and_filter(
            values,
            small_sim.sample_dt,
            50,
            11,
            filter_params,
            _search(),
            0.25,
            filter_start=60,
        )
        assert fit.y_filtered.shape == (101 - 60 - 11, 2)
        direct = filter_recursion(
            values[60:],
            0.25,
            fit.alpha,
            fit.beta,
            dt=small_sim.sample_dt,
            init_window_len=11,
        )
        np.testing.assert_allclose(fit.y_filtered, direct.y_filtered, rtol=1e-12)

    def test_filter_start_out_of_range(self, const_vol_model, small_sim, filter_params):
        values, _ = simulate_batch(const_vol_model, small_sim, [0])
        with pytest.raises(ValueError, match="filter_start"):
            fit_and_filter(
                values,
                small_sim.sample_dt,
                50,
                11,
                filter_params,
                _search(),
                0.25,
                filter_start=95,
            )

    def test_kernel_slopes_seed_the_recursions(
        self, const_vol_model, small_sim, filter_params
    ):
        """Test that each recursion starts from the kernel slope at its window end."""
        values, _ = simulate_batch(const_vol_model, small_sim, [0, 1])
        dt = small_sim.sample_dt
        kernel = KernelConfig(bandwidth=0.15)
        template = filter_params.model_copy(update={"init_slope": "local_linear"})
        fit = fit_and_filter(
            values,
            dt,
            50,
            11,
            template,
            _search(),
            0.25,
            kernel=kernel,
            filter_start=40,
        )
        for j in range(2):
            est = values[:50, j]
            expected = local_linear_slopes(
                est[:-1], np.diff(est) ** 2 / dt, [values[50, j]], kernel
            )[0]
            assert fit.y1_init[j] == pytest.approx(expected, rel=1e-12)
        direct = filter_recursion(
            values[40:],
            0.25,
            fit.alpha,
            fit.beta,
            dt=dt,
            init_window_len=11,
            y1_init=fit.y1_init,
        )
        np.testing.assert_allclose(fit.y_filtered, direct.y_filtered, rtol=1e-12)

    def test_fixed_slope_ignores_kernel(
        self, const_vol_model, small_sim, filter_params
    ):
        values, _ = simulate_batch(const_vol_model, small_sim, [0])
        fit = fit_and_filter(
            values,
            small_sim.sample_dt,
            50,
            11,
            filter_params.model_copy(update={"y1_init": 0.3}),
            _search(),
            0.25,
            kernel=KernelConfig(bandwidth=0.15),
        )
        np.testing.assert_array_equal(fit.y1_init, [0.3])


class TestEvaluateBatch:
    """Test the per-path out-of-sample evaluation."""

    def test_semi_filter_restarts_before_held_out_segment(self, small_run_config):
        """Test that the scored filter is seeded just before the held-out part."""
        exp = small_run_config.experiment_config(RATE_MODELS["quad"])
        (outcome,) = evaluate_batch(exp, [0])
        values, _ = simulate_batch(exp.model, exp.sim, [0])
        dt = exp.sim.sample_dt
        window = exp.init_window_len
        eval_start = values.shape[0] - exp.evaluation_len
        est = values[: exp.estimation_len, 0]
        slope = local_linear_slopes(
            est[:-1], np.diff(est) ** 2 / dt, [values[eval_start - 1, 0]], exp.kernel
        )[0]
        out = filter_recursion(
            values[eval_start - window :, 0],
            outcome.theta,
            outcome.alpha_hat,
            outcome.beta_hat,
            dt=dt,
            init_window_len=window,
            y1_init=slope,
        )
        assert out.y_filtered.shape == (exp.evaluation_len,)
        truth = exp.model.g_true(values[eval_start:, 0])
        assert rmse(out.y_filtered, truth) == pytest.approx(outcome.rmse_semi, rel=1e-9)

    def test_outcomes(self, small_run_config):
        exp = small_run_config.experiment_config(RATE_MODELS["lin"])
        outcomes = evaluate_batch(exp, [0, 1])
        assert [o.path_index for o in outcomes] == [0, 1]
        for outcome in outcomes:
            assert not outcome.failed
            assert outcome.rmse_semi > 0
            assert outcome.rmse_ker > 0
            assert outcome.theta != 0
            assert math.isfinite(outcome.rv_diff_semi)

    def test_batch_composition_does_not_change_outcomes(self, small_run_config):
        exp = small_run_config.experiment_config(RATE_MODELS["quad"])
        together = evaluate_batch(exp, [0, 1])
        alone = evaluate_batch(exp, [1])
        assert alone[0].alpha_hat == together[1].alpha_hat
        assert alone[0].beta_hat == together[1].beta_hat
        assert alone[0].rmse_ker == pytest.approx(together[1].rmse_ker, rel=1e-12)


class TestRunPaths:
    """Test the drop policy of the out-of-sample study."""

    def test_too_many_drops(self, workflow, mocker):
        mocker.patch(
            "spotvol.workflow.evaluate_batch",
            side_effect=lambda exp, batch: [
                _outcome(i, error="boom" if i == 0 else None) for i in batch
            ],
        )
        exp = workflow.config.experiment_config(RATE_MODELS["lin"])
        with pytest.raises(ExperimentFailedError, match="dropped 1 of 2") as exc_info:
            workflow.run_paths(exp)
        assert exc_info.value.model == "lin"

    def test_tolerated_drops_are_logged(self, workflow, mocker, caplog):
        mocker.patch(
            "spotvol.workflow.evaluate_batch",
            side_effect=lambda exp, batch: [
                _outcome(i, error="boom" if i == 0 else None) for i in batch
            ],
        )
        exp = workflow.config.experiment_config(RATE_MODELS["lin"]).model_copy(
            update={"max_drop_fraction": 0.5}
        )
        with caplog.at_level(logging.WARNING, logger="spotvol.workflow"):
            outcomes = workflow.run_paths(exp)
        assert len(outcomes) == 2
        assert "dropped path 0: boom" in caplog.text

    def test_invalid_fixed_theta(self, workflow):
        exp = workflow.config.experiment_config(RATE_MODELS["lin"]).model_copy(
            update={"fixed_theta": 0.0}
        )
        with pytest.raises(ValueError, match="theta"):
            workflow.run_paths(exp)


class TestTables:
    """Test the two summary tables."""

    def test_rows_in_model_then_method_order(self, workflow, mocker):
        mocker.patch(
            "spotvol.workflow.evaluate_batch",
            side_effect=lambda exp, batch: [_outcome(i) for i in batch],
        )
        table1, table2 = workflow.run_tables()
        keys = [(row.model, row.method) for row in table1.rows]
        assert keys == [(m, k) for m in RATE_MODELS for k in ("semi", "ker")]
        assert [(row.model, row.method) for row in table2.rows] == keys
        semi = table1.get_row("lin", "semi")
        assert semi.stats.mean == pytest.approx(1.5e-4)
        assert semi.stats.std == pytest.approx(math.sqrt(2) * 0.5e-4)
        assert table2.get_row("quad", "ker").stats.mean == pytest.approx(2e-5)
        assert table1.metadata["seed"] == 11

    def test_missing_kernel_estimate_counts_as_drop(self, mocker):
        config = load_run_config(
            overrides=[
                "sim.seed=1",
                "experiment.models=lin",
                "experiment.n_paths=4",
                "experiment.max_drop_fraction=0.25",
                "experiment.workers=1",
            ]
        )
        mocker.patch(
            "spotvol.workflow.evaluate_batch",
            side_effect=lambda exp, batch: [
                _outcome(i, rv_diff_ker=None if i == 2 else 2e-5) for i in batch
            ],
        )
        _, table2 = ExperimentWorkflow(config).run_tables()
        row = table2.get_row("lin", "ker")
        assert row.dropped == 1
        assert row.stats.n == 3
        assert table2.get_row("lin", "semi").dropped == 0

    def test_small_study(self, workflow):
        """Test the full protocol end to end on two paths per model."""
        table1 = workflow.run_table1()
        assert len(table1.rows) == 8
        for row in table1.rows:
            assert row.stats.n == 2
            assert row.stats.mean > 0
            assert row.dropped == 0

    def test_table2_schema(self, workflow):
        table2 = workflow.run_table2()
        frame = workflow.output_formatter.table_frame(table2)
        assert list(frame.columns) == ["model", "method", "mean", "std", "n", "dropped"]
        assert len(frame) == 8

    @pytest.mark.slow
    def test_worker_count_does_not_change_results(self, small_run_config):
        config = small_run_config.model_copy(
            update={
                "experiment": small_run_config.experiment.model_copy(
                    update={"models": ["lin"], "n_paths": 4, "batch_size": 2}
                )
            }
        )
        serial = ExperimentWorkflow(config).run_table1()
        config.experiment.workers = 2
        parallel = ExperimentWorkflow(config).run_table1()
        assert serial.rows == parallel.rows

    def test_perfect_estimator_matches_realized_volatility(self, lin_model):
        """Test that R - V vanishes up to sampling noise when the spot is known."""
        sim = SimConfig(gen_dt=1 / 3200, sample_dt=1 / 1600, total_span=0.25, seed=23)
        values, _ = simulate_batch(lin_model, sim, range(40))
        diffs = [
            realized_vol(Path(dt=sim.sample_dt, values=values[:, j]))
            - integrated_vol(lin_model.g_true(values[:, j]), sim.sample_dt)
            for j in range(values.shape[1])
        ]
        stats = summarize(diffs)
        assert abs(stats.mean) < 3 * stats.std / math.sqrt(stats.n)

    def test_save_tables(self, workflow, mocker, tmp_path):
        mocker.patch(
            "spotvol.workflow.evaluate_batch",
            side_effect=lambda exp, batch: [_outcome(i) for i in batch],
        )
        result = workflow.save_tables("table2", tmp_path / "out")
        files = result["file_paths"]
        assert set(files) == {"table", "manifest", "report"}
        frame = pd.read_csv(files["table"])
        assert len(frame) == 8
        manifest = json.loads(open(files["manifest"], encoding="utf-8").read())
        assert manifest["command"] == "table2"
        assert manifest["config"]["sim"]["seed"] == 11
        assert "## table2" in open(files["report"], encoding="utf-8").read()

    def test_unknown_table(self, workflow, tmp_path):
        with pytest.raises(ValueError, match="unknown table"):
            workflow.save_tables("table3", tmp_path)


class TestCurves:
    """Test the volatility-curve study."""

    def test_one_file_per_model_and_step(self, workflow, tmp_path):
        result = workflow.save_curves(tmp_path)
        files = result["file_paths"]
        for name in CURVE_MODELS:
            for inv_dt in (400, 800, 1600):
                assert f"curves_{name}_dt{inv_dt}" in files
        assert len(result["curves"]) == 12

        frame = pd.read_csv(files["curves_curve1_dt400"])
        assert list(frame.columns) == ["x", "g_true", "y_semi", "y_local_linear"]
        # 101 observations at dt = 1/400 minus an initial window of 6
        assert len(frame) == 95
        assert frame["x"].is_monotonic_increasing
        np.testing.assert_allclose(
            frame["g_true"], frame["x"].clip(lower=0), rtol=1e-12
        )

        fine = pd.read_csv(files["curves_curve4_dt1600"])
        assert len(fine) == 401 - 21

        summary = pd.read_csv(files["summary"])
        assert len(summary) == 24
        manifest = json.loads(open(files["manifest"], encoding="utf-8").read())
        assert "initial window" in manifest["init_window"]
        assert "coarsest step" in manifest["theta"]

    def test_single_model(self, small_run_config):
        config = small_run_config.model_copy(
            update={
                "model": small_run_config.model.model_copy(update={"preset": "curve2"})
            }
        )
        curves = ExperimentWorkflow(config).run_curves()
        assert [c.model for c in curves] == ["curve2"] * 3
        assert [c.dt for c in curves] == [1 / 400, 1 / 800, 1 / 1600]
        for curve in curves:
            assert curve.rmse_semi.n == 1
            assert np.all(np.diff(curve.x) >= 0)

    def _single_model(self, config, preset="curve2", **experiment):
        return config.model_copy(
            update={
                "model": config.model.model_copy(update={"preset": preset}),
                "experiment": config.experiment.model_copy(update=experiment),
            }
        )

    def test_theta_shared_across_steps(self, small_run_config):
        """Test that the coarsest step's theta is reused at the finer steps."""
        shared = ExperimentWorkflow(self._single_model(small_run_config)).run_curves()
        assert len({c.theta for c in shared}) == 1

        config = self._single_model(small_run_config, curve_share_theta=False)
        separate = ExperimentWorkflow(config).run_curves()
        assert separate[0].theta == shared[0].theta
        assert separate[0].rmse_semi == shared[0].rmse_semi

    @pytest.mark.slow
    def test_semi_error_shrinks_with_step(self):
        """Test that the mean curve RMSE over 50 paths does not grow as dt shrinks."""
        config = load_run_config(
            overrides=[
                "sim.seed=3",
                "model.preset=curve1",
                "experiment.curve_dts=1/2000,1/4000,1/8000",
                "experiment.curve_gen_dt=1/256000",
                "experiment.curve_paths=50",
                "experiment.batch_size=25",
            ]
        )
        curves = ExperimentWorkflow(config).run_curves()
        assert [c.dt for c in curves] == [1 / 2000, 1 / 4000, 1 / 8000]
        means = [c.rmse_semi.mean for c in curves]
        assert all(c.rmse_semi.n == 50 for c in curves)
        for coarse, fine in zip(means, means[1:]):
            assert fine <= 1.05 * coarse
        assert means[-1] < means[0]

    def test_steps_must_nest(self, small_run_config):
        config = small_run_config.model_copy(
            update={
                "experiment": small_run_config.experiment.model_copy(
                    update={"curve_dts": [1 / 400, 1 / 600]}
                )
            }
        )
        with pytest.raises(ValueError, match="multiple"):
            ExperimentWorkflow(config).curve_study(CURVE_MODELS["curve1"])


class TestFileCommands:
    """Test simulate, filter and local-linear on files."""

    @pytest.fixture
    def lin_workflow(self, small_run_config):
        config = small_run_config.model_copy(
            update={
                "model": small_run_config.model.model_copy(update={"preset": "lin"})
            }
        )
        return ExperimentWorkflow(config)

    def test_simulate(self, lin_workflow, tmp_path):
        result = lin_workflow.simulate(tmp_path / "path.csv")
        assert len(result["path"]) == 401
        frame = pd.read_csv(result["file_paths"]["path"])
        assert list(frame.columns) == ["t", "x"]
        assert len(frame) == 401
        assert result["file_paths"]["manifest"].endswith("path.manifest.json")

    def test_filter_file(self, lin_workflow, tmp_path):
        lin_workflow.simulate(tmp_path / "path.csv")
        result = lin_workflow.filter_file(tmp_path / "path.csv", tmp_path / "est.csv")
        frame = pd.read_csv(result["file_paths"]["estimates"])
        assert list(frame.columns) == ["t", "x", "y_filtered"]
        assert len(frame) == 401 - 21
        assert frame["t"].iloc[0] == pytest.approx(21 / 1600)
        assert (frame["y_filtered"] > 0).all()
        diagnostics = open(result["file_paths"]["diagnostics"], encoding="utf-8").read()
        assert "steps=380" in diagnostics
        assert "theta=" in diagnostics
        with open(result["file_paths"]["manifest"], encoding="utf-8") as f:
            manifest = json.load(f)
        assert manifest["estimates"]["theta"] == result["params"].theta

    def test_filter_file_short_input(self, lin_workflow, tmp_path):
        short = tmp_path / "short.csv"
        short.write_text("t,x\n0,0.1\n1,0.11\n2,0.12\n", encoding="utf-8")
        with pytest.raises(ValueError, match="window"):
            lin_workflow.filter_file(short, tmp_path / "est.csv")

    def test_local_linear_file(self, lin_workflow, tmp_path):
        lin_workflow.simulate(tmp_path / "path.csv")
        result = lin_workflow.local_linear_file(
            tmp_path / "path.csv", tmp_path / "ll.csv"
        )
        frame = pd.read_csv(result["file_paths"]["estimates"])
        assert list(frame.columns) == ["t", "x", "y_estimate"]
        assert len(frame) == 400
        assert result["missing"] == 0
