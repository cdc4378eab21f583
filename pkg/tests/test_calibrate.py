"""Calibration tests: objectives, task selection, MSP tau search."""

import json

import numpy as np
import pytest

from mint.baselines import FixedBudgetPolicy, run_policy
from mint.calibrate import (
    CalibrationError,
    GridSpec,
    calibrate_task1,
    calibrate_task2,
    calibration_report_json,
    default_threshold_grid,
    evaluate_objectives,
    fit_msp_tau,
    sweep_thresholds,
)
from mint.divergence import MetricKind
from mint.engine import EngineConfig, run_episode


@pytest.fixture(scope="module")
def exhaustive_transcripts(small_data, film_model):
    _, _, test, schema = small_data
    return [run_policy(FixedBudgetPolicy(None, None), c, film_model, schema) for c in test[:60]]


@pytest.fixture(scope="module")
def sweep_results(small_data, film_model, image_value_model):
    _, val, _, schema = small_data
    grid = default_threshold_grid(MetricKind.JS, n=9)
    results = sweep_thresholds(val[:80], film_model, schema, image_value_model, MetricKind.JS, grid)
    return grid, results


class TestEvaluateObjectives:
    def test_exhaustive_limit_is_zero_zero(self, exhaustive_transcripts):
        o1, o2 = evaluate_objectives(exhaustive_transcripts, exhaustive_transcripts)
        assert o1 == 0.0
        assert o2 == 0.0

    def test_o1_is_mean_count_difference(self, small_data, film_model, exhaustive_transcripts):
        _, _, test, schema = small_data
        cases = test[:60]
        partial = [run_policy(FixedBudgetPolicy(n_meta=3, n_images=1), c, film_model, schema) for c in cases]
        o1, _ = evaluate_objectives(partial, exhaustive_transcripts)
        mean_available = np.mean([len(c.images) + len(schema) for c in cases])
        assert o1 == pytest.approx(mean_available - 4.0, abs=1e-9)

    def test_case_mismatch_rejected(self, exhaustive_transcripts):
        with pytest.raises(CalibrationError):
            evaluate_objectives(exhaustive_transcripts[:-1], exhaustive_transcripts)

    def test_per_case_cross_entropy_flag(self, exhaustive_transcripts):
        o1, o2 = evaluate_objectives(exhaustive_transcripts, exhaustive_transcripts, per_case=True)
        assert o1 == 0.0 and o2 == 0.0


class TestGrid:
    def test_default_grid_has_anchors(self):
        grid = default_threshold_grid(MetricKind.JS)
        assert grid.t_meta_values[0] == -np.inf and grid.t_meta_values[-1] == np.inf
        assert grid.t_image_values[0] == -np.inf and grid.t_image_values[-1] == np.inf
        assert len(grid.t_meta_values) == 13
        assert list(grid.t_meta_values) == sorted(grid.t_meta_values)

    def test_sweep_matches_engine_rerun(self, small_data, film_model, image_value_model, sweep_results):
        """The sweep's stats must be reproducible by fresh engine runs."""
        _, val, _, schema = small_data
        grid, results = sweep_results
        some = [r for r in results if np.isfinite(r.t_meta) and np.isfinite(r.t_image)][::11][:3]
        for r in some:
            config = EngineConfig(metric=MetricKind.JS, t_meta=r.t_meta, t_image=r.t_image)
            ts = [run_episode(c, film_model, schema, config, image_value_model) for c in val[:80]]
            assert np.mean([t.n_meta_acquired for t in ts]) == pytest.approx(r.stats.mean_meta, abs=1e-12)
            assert np.mean([t.n_images_acquired for t in ts]) == pytest.approx(r.stats.mean_images, abs=1e-12)
            from mint.evalharness import topk_accuracy

            top3 = topk_accuracy([t.final_prediction for t in ts], [t.label for t in ts], 3)
            assert top3 == pytest.approx(r.stats.top3_accuracy, abs=1e-12)


class TestTask1:
    def test_unconstrained_returns_largest_reduction(self, small_data, film_model, image_value_model, sweep_results):
        _, val, _, schema = small_data
        grid, pre = sweep_results
        point, results = calibrate_task1(
            val[:80], film_model, schema, image_value_model, MetricKind.JS, epsilon2=1.0, grid=grid, precomputed=pre
        )
        assert point.achieved.mean_inputs_acquired == min(r.stats.mean_inputs_acquired for r in results)
        # the +inf/+inf anchor acquires only the first image
        assert point.achieved.mean_meta == 0.0
        assert point.achieved.mean_images == 1.0

    def test_epsilon_zero_feasible_via_anchor(self, small_data, film_model, image_value_model, sweep_results):
        _, val, _, schema = small_data
        grid, pre = sweep_results
        point, _ = calibrate_task1(
            val[:80], film_model, schema, image_value_model, MetricKind.JS, epsilon2=0.0, grid=grid, precomputed=pre
        )
        # feasible at epsilon 0: the -inf anchor gives O2 = 0 exactly
        assert point.achieved.top3_accuracy >= 0.0

    def test_infeasible_reports_best(self, small_data, film_model, image_value_model):
        _, val, _, schema = small_data
        grid = GridSpec(t_meta_values=(np.inf,), t_image_values=(np.inf,))
        with pytest.raises(CalibrationError, match="best achievable"):
            calibrate_task1(val[:40], film_model, schema, image_value_model, MetricKind.JS, epsilon2=0.0, grid=grid)

    def test_feasible_set_monotone_in_epsilon(self, small_data, film_model, image_value_model, sweep_results):
        _, val, _, schema = small_data
        grid, pre = sweep_results
        o1s = []
        for eps in (0.01, 0.05, 0.2):
            point, results = calibrate_task1(
                val[:80], film_model, schema, image_value_model, MetricKind.JS, epsilon2=eps, grid=grid, precomputed=pre
            )
            chosen = [r for r in results if r.t_meta == point.t_meta and r.t_image == point.t_image][0]
            o1s.append(chosen.o1)
        assert o1s == sorted(o1s)

    def test_negative_epsilon_rejected(self, small_data, film_model, image_value_model):
        _, val, _, schema = small_data
        with pytest.raises(CalibrationError):
            calibrate_task1(val[:10], film_model, schema, image_value_model, MetricKind.JS, epsilon2=-0.1)


class TestTask2:
    def test_epsilon_zero_returns_zero_o2(self, small_data, film_model, image_value_model, sweep_results):
        _, val, _, schema = small_data
        grid, pre = sweep_results
        point, results = calibrate_task2(
            val[:80], film_model, schema, image_value_model, MetricKind.JS, epsilon1=0.0, grid=grid, precomputed=pre
        )
        chosen = [r for r in results if r.t_meta == point.t_meta and r.t_image == point.t_image][0]
        assert chosen.o2 == 0.0

    def test_extreme_budget_forces_minimal_acquisition(self, small_data, film_model, image_value_model, sweep_results):
        _, val, _, schema = small_data
        grid, results = sweep_results
        max_o1 = max(r.o1 for r in results)
        point, _ = calibrate_task2(
            val[:80], film_model, schema, image_value_model, MetricKind.JS, epsilon1=max_o1, grid=grid, precomputed=results
        )
        # only the most aggressive point(s) qualify: first image, nothing else
        assert point.achieved.mean_inputs_acquired <= 1.0 + 1e-9

    def test_feasible_monotone_in_epsilon(self, small_data, film_model, image_value_model, sweep_results):
        _, val, _, schema = small_data
        grid, pre = sweep_results
        o2s = []
        for eps in (6.0, 3.0, 0.0):
            point, results = calibrate_task2(
                val[:80], film_model, schema, image_value_model, MetricKind.JS, epsilon1=eps, grid=grid, precomputed=pre
            )
            chosen = [r for r in results if r.t_meta == point.t_meta and r.t_image == point.t_image][0]
            o2s.append(chosen.o2)
        # relaxing the required reduction never increases the achieved drop
        assert o2s == sorted(o2s, reverse=True)

    def test_infeasible_rejected(self, small_data, film_model, image_value_model, sweep_results):
        _, val, _, schema = small_data
        grid, pre = sweep_results
        with pytest.raises(CalibrationError):
            calibrate_task2(
                val[:80], film_model, schema, image_value_model, MetricKind.JS, epsilon1=999.0, grid=grid, precomputed=pre
            )


class TestReport:
    def test_report_is_valid_json(self, small_data, film_model, image_value_model, sweep_results):
        _, val, _, schema = small_data
        grid, pre = sweep_results
        point, results = calibrate_task1(
            val[:80], film_model, schema, image_value_model, MetricKind.JS, epsilon2=0.05, grid=grid, precomputed=pre
        )
        doc = json.loads(calibration_report_json(point, results, grid))
        assert doc["task"] == "task1"
        assert len(doc["points"]) == len(results)
        assert doc["chosen"]["t_meta"] == point.t_meta or (
            np.isinf(point.t_meta) and isinstance(doc["chosen"]["t_meta"], float)
        )


class TestFitMSPTau:
    def test_target_one_returns_zero(self, small_data, film_model):
        _, val, _, schema = small_data
        assert fit_msp_tau(val[:40], film_model, schema, target_mean_images=1.0, seed=1) == 0.0

    def test_target_all_returns_one(self, small_data, film_model):
        _, val, _, schema = small_data
        cases = val[:40]
        target = float(np.mean([len(c.images) for c in cases]))
        assert fit_msp_tau(cases, film_model, schema, target_mean_images=target, seed=1) == 1.0

    def test_mid_target_lands_within_tolerance(self, small_data, film_model):
        from mint.baselines import msp_early_stop_episode

        _, val, _, schema = small_data
        cases = val[:60]
        tau = fit_msp_tau(cases, film_model, schema, target_mean_images=2.0, seed=1)
        mean = np.mean([msp_early_stop_episode(c, film_model, schema, tau, 1).n_images_acquired for c in cases])
        assert abs(mean - 2.0) <= 0.1

    def test_unreachable_target_rejected(self, small_data, film_model):
        _, val, _, schema = small_data
        with pytest.raises(CalibrationError):
            fit_msp_tau(val[:40], film_model, schema, target_mean_images=50.0, seed=1)
