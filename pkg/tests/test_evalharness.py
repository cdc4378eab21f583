"""Eval harness tests: accuracy, curves, and behavior statistics."""

import math

import numpy as np
import pytest

from mint.core import PredictiveDistribution
from mint.engine import (
    Action,
    EpisodeTranscript,
    TranscriptStep,
)
from mint.evalharness import (
    CurvePoint,
    anova_f,
    chi_square_question_frequency,
    chi2_survival,
    curve_to_csv,
    histogram_to_csv,
    input_histogram,
    interaction_curve,
    question_ask_counts,
    spearman,
    topk_accuracy,
)


def make_transcript(case_id, label, preds, n_images=1, n_meta_available=4, field_ids=None):
    """Transcript scaffold: preds[0] is the initial prediction, the rest are
    per-interaction metadata acquisitions."""
    field_ids = field_ids or list(range(len(preds) - 1))
    steps = []
    for i, (p, fid) in enumerate(zip(preds[1:], field_ids)):
        steps.append(
            TranscriptStep(
                step=i,
                n_images_before=n_images,
                n_meta_before=i,
                values=(),
                action=Action.acquire_metadata(fid),
                revealed={"field_id": fid, "answer": 0},
                prediction_after=tuple(p),
            )
        )
    steps.append(
        TranscriptStep(
            step=len(steps),
            n_images_before=n_images,
            n_meta_before=len(preds) - 1,
            values=(),
            action=Action.stop("all_values_below_threshold"),
            revealed=None,
            prediction_after=None,
        )
    )
    return EpisodeTranscript(
        case_id=case_id,
        label=label,
        policy="test",
        setup_images=((0, "near"),),
        initial_prediction=tuple(preds[0]),
        steps=tuple(steps),
        final_prediction=tuple(preds[-1]),
        stop_reason="all_values_below_threshold",
        n_images_acquired=n_images,
        n_meta_acquired=len(preds) - 1,
        n_images_available=n_images,
        n_meta_available=n_meta_available,
    )


class TestTopkAccuracy:
    def test_k_equals_c_is_one(self):
        preds = [PredictiveDistribution(np.array([0.2, 0.3, 0.5]))] * 4
        assert topk_accuracy(preds, [0, 1, 2, 0], 3) == 1.0

    def test_one_hot_counted_correct(self):
        preds = [PredictiveDistribution(np.array([0.0, 1.0, 0.0]))]
        assert topk_accuracy(preds, [1], 1) == 1.0

    def test_hand_ranked(self):
        preds = [np.array([0.5, 0.3, 0.2]), np.array([0.2, 0.3, 0.5])]
        assert topk_accuracy(preds, [0, 1], 1) == 0.5

    def test_ties_break_to_lower_index(self):
        preds = [np.array([0.5, 0.5])]
        assert topk_accuracy(preds, [0], 1) == 1.0
        assert topk_accuracy(preds, [1], 1) == 0.0

    def test_monotone_in_k(self):
        rng = np.random.default_rng(3)
        preds = [rng.dirichlet(np.ones(6)) for _ in range(40)]
        labels = rng.integers(0, 6, size=40).tolist()
        accs = [topk_accuracy(preds, labels, k) for k in range(1, 7)]
        assert all(a <= b for a, b in zip(accs, accs[1:]))

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            topk_accuracy([np.array([1.0, 0.0])], [0, 1], 1)


class TestInteractionCurve:
    def test_flat_when_no_interactions(self):
        ts = [make_transcript(i, 0, [[0.9, 0.1, 0.0]]) for i in range(3)]
        points, auc = interaction_curve(ts, k=1)
        assert len(points) == 1
        assert points[0].top3 == 1.0
        assert auc == 1.0

    def test_monotone_fixture_produces_non_decreasing_curve(self):
        # case improves from wrong to right at step 1
        good = [[0.1, 0.9], [0.9, 0.1]]
        ts = [make_transcript(i, 0, good) for i in range(4)]
        points, auc = interaction_curve(ts, k=1)
        assert [p.top3 for p in points] == [0.0, 1.0]
        assert auc == 0.5

    def test_early_stoppers_carry_final_prediction(self):
        long = make_transcript(0, 0, [[0.5, 0.5], [0.4, 0.6], [0.9, 0.1]])
        short = make_transcript(1, 0, [[0.2, 0.8], [0.8, 0.2]])
        points, _ = interaction_curve([long, short], k=1)
        # n=2: long contributes its third prediction, short its final one
        assert points[2].top3 == 1.0
        assert points[2].n_cases_contributing == 1

    def test_final_point_equals_final_topk(self):
        ts = [
            make_transcript(0, 0, [[0.5, 0.5], [0.1, 0.9], [0.9, 0.1]]),
            make_transcript(1, 1, [[0.5, 0.5], [0.2, 0.8]]),
        ]
        points, _ = interaction_curve(ts, k=1)
        final_preds = [t.final_prediction for t in ts]
        labels = [t.label for t in ts]
        assert points[-1].top3 == topk_accuracy(final_preds, labels, 1)


class TestSpearman:
    def test_perfect_positive(self):
        rho, p = spearman([1, 2, 3, 4], [10, 20, 30, 40])
        assert rho == pytest.approx(1.0)
        assert p == 0.0

    def test_perfect_negative(self):
        rho, _ = spearman([1, 2, 3, 4], [4, 3, 2, 1])
        assert rho == pytest.approx(-1.0)

    def test_hand_ranked_pairs(self):
        # d^2 = [1,1,1,1,0] -> rho = 1 - 6*4/(5*24) = 0.8
        rho, p = spearman([1, 2, 3, 4, 5], [2, 1, 4, 3, 5])
        assert rho == pytest.approx(0.8, abs=1e-12)
        assert p == pytest.approx(0.104088, abs=1e-6)

    def test_average_ranks_for_ties(self):
        rho, _ = spearman([1, 1, 2, 3], [1, 2, 3, 4])
        assert -1.0 < rho < 1.0

    def test_constant_input_rejected(self):
        with pytest.raises(ValueError):
            spearman([1, 1, 1], [1, 2, 3])

    def test_short_input_rejected(self):
        with pytest.raises(ValueError):
            spearman([1, 2], [1, 2])


class TestAnovaF:
    def test_identical_groups_zero(self):
        f, _ = anova_f([[1.0, 2.0, 3.0], [1.0, 2.0, 3.0]], n_permutations=200, seed=0)
        assert f == 0.0

    def test_degenerate_within_variance(self):
        f, p = anova_f([[0.0, 0.0], [10.0, 10.0]], n_permutations=999, seed=0)
        assert math.isinf(f)
        # with 2+2 values a third of shuffles regenerate the exact split
        assert p == pytest.approx(1 / 3, abs=0.06)

    def test_degenerate_large_groups_reach_permutation_floor(self):
        f, p = anova_f([[0.0] * 8, [10.0] * 8], n_permutations=999, seed=0)
        assert math.isinf(f)
        assert p <= 0.01

    def test_hand_computed_f(self):
        f, _ = anova_f([[1, 2, 3], [2, 3, 4]], n_permutations=100, seed=0)
        assert f == pytest.approx(1.5, abs=1e-12)

    def test_permutation_p_is_seeded(self):
        a = anova_f([[1, 2, 3], [4, 5, 6]], n_permutations=500, seed=3)
        b = anova_f([[1, 2, 3], [4, 5, 6]], n_permutations=500, seed=3)
        assert a == b

    def test_degenerate_input_rejected(self):
        with pytest.raises(ValueError):
            anova_f([[1.0]])


class TestChiSquare:
    def test_proportional_counts_give_zero(self):
        res = chi_square_question_frequency(
            {"g": {0: 10, 1: 30}}, {0: 100, 1: 300}, alpha=0.001, bonferroni_m=1
        )
        assert res["g"].stat == pytest.approx(0.0, abs=1e-12)
        assert not res["g"].significant

    def test_hand_computed_stat(self):
        # expected 20/20 from a 50/50 global mix over 40 asks -> (10^2+10^2)/20
        res = chi_square_question_frequency(
            {"g": {0: 30, 1: 10}}, {0: 50, 1: 50}, alpha=0.001, bonferroni_m=1
        )
        assert res["g"].stat == pytest.approx(10.0, abs=1e-12)
        assert res["g"].p == pytest.approx(chi2_survival(10.0, 1), abs=1e-15)
        assert res["g"].p == pytest.approx(0.0015654, abs=1e-6)

    def test_bonferroni_divides_alpha(self):
        res_loose = chi_square_question_frequency(
            {"g": {0: 30, 1: 10}}, {0: 50, 1: 50}, alpha=0.01, bonferroni_m=1
        )
        res_tight = chi_square_question_frequency(
            {"g": {0: 30, 1: 10}}, {0: 50, 1: 50}, alpha=0.01, bonferroni_m=10
        )
        assert res_loose["g"].significant
        assert not res_tight["g"].significant

    def test_zero_expected_pooled_and_flagged(self):
        res = chi_square_question_frequency(
            {"g": {0: 10, 1: 0, 2: 5}}, {0: 50, 1: 0, 2: 50}, alpha=0.01, bonferroni_m=1
        )
        assert res["g"].pooled_zero_expected
        assert math.isfinite(res["g"].stat)
        res2 = chi_square_question_frequency(
            {"g": {0: 10, 1: 3, 2: 5}}, {0: 50, 1: 0, 2: 50}, alpha=0.01, bonferroni_m=1
        )
        assert math.isinf(res2["g"].stat)
        assert res2["g"].p == 0.0


class TestChiSquareSignificanceFix:
    def test_stat_ten_df_one_not_significant_at_strict_alpha(self):
        res = chi_square_question_frequency(
            {"g": {0: 30, 1: 10}}, {0: 50, 1: 50}, alpha=0.001, bonferroni_m=1
        )
        assert not res["g"].significant


class TestInputHistogram:
    def test_counts_sum_to_cases(self):
        ts = [
            make_transcript(0, 0, [[0.5, 0.5], [0.6, 0.4]]),
            make_transcript(1, 0, [[0.5, 0.5]]),
            make_transcript(2, 1, [[0.5, 0.5], [0.6, 0.4]]),
        ]
        hist = input_histogram(ts, "metadata")
        assert hist == {1: 2, 0: 1}
        assert sum(hist.values()) == 3
        img_hist = input_histogram(ts, "images")
        assert img_hist == {1: 3}

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError):
            input_histogram([], "pixels")


class TestHelpers:
    def test_question_ask_counts(self):
        ts = [
            make_transcript(0, 0, [[0.5, 0.5], [0.6, 0.4]], field_ids=[2]),
            make_transcript(1, 0, [[0.5, 0.5], [0.6, 0.4]], field_ids=[2]),
        ]
        assert question_ask_counts(ts) == {2: 2}

    def test_csv_emission(self):
        csv = curve_to_csv([CurvePoint(0, 0.5, 10), CurvePoint(1, 0.75, 8)])
        assert csv.splitlines()[0] == "n_interactions,top3,n_cases_contributing"
        assert "1,0.75,8" in csv
        hcsv = histogram_to_csv({2: 5, 0: 1}, "images")
        assert hcsv.splitlines()[1] == "0,1"
