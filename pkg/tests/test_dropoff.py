"""Drop-off simulation tests: oracles, CRN dominance, monotonicity."""

import numpy as np
import pytest

from mint.dropoff import (
    ComparisonResult,
    DropoffError,
    FlowModel,
    ScreenSpec,
    closed_form_drop_rate,
    compare,
    simulate,
)
from mint.engine import Action, EpisodeTranscript, TranscriptStep


def make_transcript(case_id, label, field_ids, n_images, final=(0.7, 0.2, 0.1), n_images_available=6):
    steps = []
    for i, fid in enumerate(field_ids):
        steps.append(
            TranscriptStep(
                step=i,
                n_images_before=n_images,
                n_meta_before=i,
                values=(),
                action=Action.acquire_metadata(fid),
                revealed={"field_id": fid, "answer": 0},
                prediction_after=final,
            )
        )
    steps.append(
        TranscriptStep(
            step=len(steps),
            n_images_before=n_images,
            n_meta_before=len(field_ids),
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
        setup_images=tuple((i, "near") for i in range(n_images)),
        initial_prediction=final,
        steps=tuple(steps),
        final_prediction=final,
        stop_reason="all_values_below_threshold",
        n_images_acquired=n_images,
        n_meta_acquired=len(field_ids),
        n_images_available=n_images_available,
        n_meta_available=8,
    )


def flow_with(p_screen=0.1, p_images=0.0, n_screens=3):
    return FlowModel(
        screens=tuple(ScreenSpec(i, p_screen) for i in range(n_screens)),
        field_to_screen={fid: fid % n_screens for fid in range(8)},
        images_p_drop=p_images,
    )


class TestFlowModel:
    def test_probability_validation(self):
        with pytest.raises(DropoffError):
            ScreenSpec(0, 1.5)
        with pytest.raises(DropoffError):
            FlowModel(screens=(ScreenSpec(0, 0.1),), field_to_screen={0: 9})

    def test_per_image_drop_solves_nominal_total(self):
        flow = flow_with(p_images=0.3)
        q = flow.per_image_drop_prob
        assert (1 - q) ** 3 == pytest.approx(0.7, abs=1e-12)

    def test_round_trip(self, tmp_path):
        flow = flow_with(0.05, 0.1)
        path = tmp_path / "flow.json"
        flow.save(path)
        assert FlowModel.load(path) == flow

    def test_from_schema(self, schema):
        flow = FlowModel.from_schema(schema, p_drop=0.01, images_p_drop=0.02)
        assert set(flow.field_to_screen) == set(range(len(schema)))
        assert len(flow.screens) == len(schema.screen_ids)


class TestSimulate:
    def test_zero_drop_probabilities(self):
        ts = [make_transcript(i, 0, [0, 1], 2) for i in range(20)]
        res = simulate(ts, flow_with(0.0, 0.0), n_sims=50, seed=1)
        assert res.drop_rate.mean == 0.0
        # with nothing dropped, correct-shown equals plain top-3 accuracy
        assert res.correct_shown_rate.mean == 1.0
        res_wrong = simulate([make_transcript(0, 2, [0], 1, final=(0.5, 0.3, 0.2))], flow_with(0.0, 0.0), 10, 1)
        assert res_wrong.correct_shown_rate.mean == 1.0  # label 2 in top-3 of 3 classes
        res_missed = simulate(
            [make_transcript(0, 3, [0], 1, final=(0.4, 0.3, 0.2, 0.1))], flow_with(0.0, 0.0), 10, 1
        )
        assert res_missed.correct_shown_rate.mean == 0.0

    def test_certain_drop(self):
        ts = [make_transcript(i, 0, [0], 1) for i in range(5)]
        flow = FlowModel(
            screens=(ScreenSpec(0, 1.0), ScreenSpec(1, 0.0), ScreenSpec(2, 0.0)),
            field_to_screen={fid: fid % 3 for fid in range(8)},
            images_p_drop=0.0,
        )
        res = simulate(ts, flow, n_sims=20, seed=3)
        assert res.drop_rate.mean == 1.0

    def test_binomial_oracle_single_screen(self):
        # one touched screen at p=0.1 over 500 cases and 1000 sims
        ts = [make_transcript(i, 0, [0], 0) for i in range(500)]
        flow = FlowModel(
            screens=(ScreenSpec(0, 0.1),), field_to_screen={fid: 0 for fid in range(8)}, images_p_drop=0.0
        )
        res = simulate(ts, flow, n_sims=1000, seed=5)
        assert 0.09 <= res.drop_rate.mean <= 0.11
        assert res.drop_rate.ci_low <= res.drop_rate.mean <= res.drop_rate.ci_high

    def test_closed_form_oracle_within_three_se(self):
        rng = np.random.default_rng(0)
        ts = [
            make_transcript(i, 0, sorted(rng.choice(8, size=rng.integers(1, 6), replace=False).tolist()), int(rng.integers(1, 5)))
            for i in range(200)
        ]
        flow = flow_with(0.04, 0.06)
        res = simulate(ts, flow, n_sims=1000, seed=9)
        se = float(np.std(res.per_sim_drop)) / np.sqrt(len(res.per_sim_drop))
        assert abs(res.drop_rate.mean - closed_form_drop_rate(ts, flow)) <= 3 * se

    def test_seeded_determinism(self):
        ts = [make_transcript(i, 0, [0, 3], 2) for i in range(30)]
        a = simulate(ts, flow_with(0.2, 0.1), n_sims=100, seed=7)
        b = simulate(ts, flow_with(0.2, 0.1), n_sims=100, seed=7)
        assert np.array_equal(a.per_sim_drop, b.per_sim_drop)

    def test_monotone_in_p_drop(self):
        ts = [make_transcript(i, 0, [0, 1, 2], 2) for i in range(50)]
        rates = []
        for p in (0.01, 0.05, 0.1, 0.3):
            rates.append(simulate(ts, flow_with(p, 0.0), n_sims=300, seed=2).per_sim_drop)
        # paired-CRN: same seed and slots, so per-sim rates are monotone
        for lo, hi in zip(rates, rates[1:]):
            assert np.all(lo <= hi)

    def test_n_sims_validation(self):
        with pytest.raises(DropoffError):
            simulate([make_transcript(0, 0, [0], 1)], flow_with(), n_sims=0, seed=0)


class TestCompare:
    def test_identical_sets_give_zero_deltas(self):
        ts = [make_transcript(i, 0, [0, 1], 2) for i in range(25)]
        res = compare(ts, ts, flow_with(0.2, 0.1), n_sims=200, seed=4)
        assert res.drop_delta.mean == 0.0
        assert res.correct_delta.mean == 0.0
        assert res.dominance_fraction == 1.0

    def test_subset_dominance_exact_in_every_simulation(self):
        rng = np.random.default_rng(1)
        mint_ts, full_ts = [], []
        for i in range(60):
            all_fields = sorted(rng.choice(8, size=int(rng.integers(3, 9)), replace=False).tolist())
            subset = all_fields[: int(rng.integers(0, len(all_fields)))]
            n_img_full = int(rng.integers(2, 6))
            n_img_sub = int(rng.integers(1, n_img_full + 1))
            full_ts.append(make_transcript(i, 0, all_fields, n_img_full))
            mint_ts.append(make_transcript(i, 0, subset, n_img_sub))
        res = compare(mint_ts, full_ts, flow_with(0.15, 0.2), n_sims=500, seed=11)
        assert res.subset_relation_holds
        assert res.dominance_fraction == 1.0
        assert np.all(res.left.per_sim_drop <= res.right.per_sim_drop)

    def test_case_mismatch_rejected(self):
        a = [make_transcript(0, 0, [0], 1)]
        b = [make_transcript(1, 0, [0], 1)]
        with pytest.raises(DropoffError):
            compare(a, b, flow_with(), n_sims=10, seed=0)

    def test_correct_shown_can_favor_fewer_inputs(self):
        # same predictions, subset flow -> more users reach the result
        full = [make_transcript(i, 0, list(range(8)), 3) for i in range(40)]
        mint = [make_transcript(i, 0, [0], 1) for i in range(40)]
        res = compare(mint, full, flow_with(0.1, 0.1), n_sims=400, seed=6)
        assert res.correct_delta.mean > 0
        assert res.drop_delta.mean < 0
