"""Threshold calibration: sweep a (metadata, image) threshold grid on the
validation set and pick operating points for the two calibration regimes.

Task 1 maximizes the input reduction subject to a tolerated performance
drop; Task 2 minimizes the performance drop subject to a required input
reduction. Raw candidate values do not depend on thresholds, so the sweep
memoizes state evaluations per case and replays the acquisition walk for
each grid point; a fresh engine run at the chosen point reproduces the
reported statistics exactly.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .core import Case, ClassifierInterface, MetadataSchema, ViewType, VIEW_ORDER
from .divergence import MetricKind
from .engine import (
    CaseEvaluator,
    EngineConfig,
    EpisodeTranscript,
    FIRST_LISTED,
    ImageValueModel,
    SEEDED_RANDOM,
    StateEval,
    _sort_value,
    image_value_features,
    reveal_case_image,
)
from .evalharness import topk_accuracy


class CalibrationError(RuntimeError):
    pass


@dataclass(frozen=True)
class AchievedStats:
    top3_accuracy: float
    mean_inputs_acquired: float
    mean_meta: float
    mean_images: float
    median_interactions: float
    reduction_fraction: float


@dataclass(frozen=True)
class GridPointResult:
    t_meta: float
    t_image: float
    o1: float
    o2: float
    stats: AchievedStats


@dataclass(frozen=True)
class OperatingPoint:
    t_meta: float
    t_image: float
    achieved: AchievedStats
    task: str
    epsilon: float

    def to_json_dict(self) -> dict:
        return {
            "t_meta": self.t_meta,
            "t_image": self.t_image,
            "achieved": asdict(self.achieved),
            "task": self.task,
            "epsilon": self.epsilon,
        }


@dataclass(frozen=True)
class GridSpec:
    t_meta_values: tuple[float, ...]
    t_image_values: tuple[float, ...]

    def points(self) -> list[tuple[float, float]]:
        return [(tm, ti) for tm in self.t_meta_values for ti in self.t_image_values]


_METRIC_RANGES = {
    MetricKind.JS: (1e-4, 0.5),
    MetricKind.KL: (1e-4, 1.0),
    MetricKind.ENTROPY: (1e-4, 1.0),
}


def _mixed_scale(lo: float, hi: float, count: int) -> list[float]:
    """Log-spaced values for small-threshold resolution plus linear values
    covering the mid range."""
    n_log = (count + 1) // 2
    n_lin = count - n_log
    values = set(float(x) for x in np.geomspace(lo, hi, n_log))
    if n_lin > 0:
        values.update(float(x) for x in np.linspace(hi * 0.08, hi * 0.75, n_lin))
    return sorted(values)


def default_threshold_grid(metric: MetricKind, n: int = 13) -> GridSpec:
    """Log/linear-spaced thresholds with -inf/+inf anchors at both ends.

    The anchors guarantee calibration feasibility: -inf acquires everything
    (zero performance drop), +inf acquires nothing beyond the first image
    (maximal reduction).
    """
    lo, hi = _METRIC_RANGES[MetricKind(metric)]
    meta_values = (-np.inf, *_mixed_scale(lo, hi, n - 2), np.inf)
    image_values = (-np.inf, *_mixed_scale(1e-4, 0.5, n - 2), np.inf)
    return GridSpec(t_meta_values=meta_values, t_image_values=image_values)


# --------------------------------------------------------------------------
# Objectives
# --------------------------------------------------------------------------


def evaluate_objectives(
    transcripts: Sequence[EpisodeTranscript],
    full_transcripts: Sequence[EpisodeTranscript],
    k: int = 3,
    per_case: bool = False,
) -> tuple[float, float]:
    """Input-reduction objective and performance-change objective.

    O1 is the mean count of available inputs minus the mean acquired. O2 is
    the absolute difference in aggregate Top-k accuracy between full-input
    and acquired-input predictions; with ``per_case`` it is instead the mean
    per-case absolute cross-entropy difference.
    """
    ids_a = sorted(t.case_id for t in transcripts)
    ids_b = sorted(t.case_id for t in full_transcripts)
    if ids_a != ids_b:
        raise CalibrationError("transcript sets cover different cases")
    by_id = {t.case_id: t for t in full_transcripts}
    o1 = float(np.mean([t.total_available for t in transcripts]) - np.mean([t.total_acquired for t in transcripts]))
    if per_case:
        diffs = []
        for t in transcripts:
            full = by_id[t.case_id]
            ce_a = -np.log(max(t.final_prediction[t.label], 1e-300))
            ce_f = -np.log(max(full.final_prediction[full.label], 1e-300))
            diffs.append(abs(ce_f - ce_a))
        return o1, float(np.mean(diffs))
    labels = [t.label for t in transcripts]
    acc_acquired = topk_accuracy([t.final_prediction for t in transcripts], labels, k)
    full_ordered = [by_id[t.case_id] for t in transcripts]
    acc_full = topk_accuracy([t.final_prediction for t in full_ordered], labels, k)
    return o1, abs(acc_full - acc_acquired)


# --------------------------------------------------------------------------
# Grid sweep with per-case memoized evaluations
# --------------------------------------------------------------------------


class _CaseSweeper:
    """Replays the engine's acquisition walk for many threshold pairs.

    Shares one memoized evaluator per case, so overlapping trajectory
    prefixes across grid points cost one batched model call each. The walk
    must mirror the engine's decision rule exactly; a dedicated test pins
    walker-vs-engine equality.
    """

    def __init__(
        self,
        case: Case,
        model: ClassifierInterface,
        schema: MetadataSchema,
        metric: MetricKind,
        ivm: ImageValueModel | None,
        kl_reverse: bool = False,
        images_upfront: bool = False,
        first_image_policy: str = FIRST_LISTED,
        episode_seed: int = 0,
    ):
        self.case = case
        self.schema = schema
        self.ivm = ivm
        self.evaluator = CaseEvaluator(case, model, schema, metric, kl_reverse=kl_reverse)
        if images_upfront:
            self.initial_images = tuple(range(len(case.images)))
        elif first_image_policy == FIRST_LISTED:
            self.initial_images = (0,)
        elif first_image_policy == SEEDED_RANDOM:
            rng = np.random.default_rng([episode_seed, case.case_id])
            self.initial_images = (int(rng.integers(0, len(case.images))),)
        else:
            raise ValueError(f"unknown first image policy {first_image_policy!r}")
        self._image_value_cache: dict[tuple[frozenset, frozenset], dict[ViewType | None, float]] = {}

    def _image_values(self, key, state_eval: StateEval, views) -> dict:
        cached = self._image_value_cache.get(key)
        if cached is None:
            cached = {}
            self._image_value_cache[key] = cached
        for view in views:
            if view not in cached:
                if self.ivm is None:
                    cached[view] = 0.0
                else:
                    feats = image_value_features(
                        state_eval.entropy, state_eval.top1, state_eval.top2, len(key[1]), len(key[0]), view
                    )
                    cached[view] = self.ivm.predict_value(feats)
        return cached

    def run(self, config: EngineConfig) -> tuple[tuple[float, ...], int, int, int]:
        """(final prediction, n_meta, n_images, interactions) at one grid point."""
        meta: frozenset[int] = frozenset()
        images: frozenset[int] = frozenset(self.initial_images)
        interactions = 0
        while True:
            key = (meta, images)
            state_eval = self.evaluator.evaluate(meta, images)
            candidate_fields = [fid for fid in sorted(state_eval.meta_raw)]
            has_unused = len(images) < len(self.case.images)
            views: list[ViewType | None]
            if not has_unused:
                views = []
            elif config.instruction_mode:
                views = list(VIEW_ORDER)
            else:
                views = [None]
            if not candidate_fields and not views:
                break
            if config.max_steps is not None and interactions >= config.max_steps:
                break
            best_kind, best_target, best_sort = None, None, -np.inf
            for fid in candidate_fields:
                eligible, sort_value = _sort_value(state_eval.meta_raw[fid], config.t_meta)
                if eligible and sort_value > best_sort:
                    best_kind, best_target, best_sort = "meta", fid, sort_value
            if views:
                image_values = self._image_values(key, state_eval, views)
                for view in views:
                    eligible, sort_value = _sort_value(image_values[view], config.t_image)
                    if eligible and sort_value > best_sort:
                        best_kind, best_target, best_sort = "image", view, sort_value
            if best_kind is None:
                break
            if best_kind == "meta":
                meta = meta | {best_target}
            else:
                idx, _, _ = reveal_case_image(self.case, set(images), best_target)
                images = images | {idx}
            interactions += 1
        final_eval = self.evaluator.evaluate(meta, images)
        final = tuple(float(x) for x in final_eval.prediction.probs)
        return final, len(meta), len(images), interactions


def sweep_thresholds(
    cases: Sequence[Case],
    model: ClassifierInterface,
    schema: MetadataSchema,
    ivm: ImageValueModel | None,
    metric: MetricKind,
    grid: GridSpec,
    *,
    instruction_mode: bool = False,
    kl_reverse: bool = False,
    images_upfront: bool = False,
    first_image_policy: str = FIRST_LISTED,
    episode_seed: int = 0,
    threads: int | None = None,
) -> list[GridPointResult]:
    """Evaluate every grid point on the case set; order follows the grid."""
    sweepers = [
        _CaseSweeper(
            case,
            model,
            schema,
            metric,
            ivm,
            kl_reverse=kl_reverse,
            images_upfront=images_upfront,
            first_image_policy=first_image_policy,
            episode_seed=episode_seed,
        )
        for case in cases
    ]
    labels = [case.label for case in cases]
    total_available = float(np.mean([len(case.images) + len(schema) for case in cases]))
    full_preds = [sw.evaluator.evaluate(frozenset(range(len(schema))), frozenset(range(len(sw.case.images)))) for sw in sweepers]
    full_top3 = topk_accuracy([fe.prediction.probs for fe in full_preds], labels, min(3, len(full_preds[0].prediction)))

    def eval_point(point: tuple[float, float]) -> GridPointResult:
        t_meta, t_image = point
        config = EngineConfig(metric=metric, t_meta=t_meta, t_image=t_image, instruction_mode=instruction_mode, kl_reverse=kl_reverse)
        finals, metas, images, inters = [], [], [], []
        for sw in sweepers:
            final, n_meta, n_img, n_inter = sw.run(config)
            finals.append(final)
            metas.append(n_meta)
            images.append(n_img)
            inters.append(n_inter)
        top3 = topk_accuracy(finals, labels, min(3, len(finals[0])))
        mean_acquired = float(np.mean(metas) + np.mean(images))
        stats = AchievedStats(
            top3_accuracy=top3,
            mean_inputs_acquired=mean_acquired,
            mean_meta=float(np.mean(metas)),
            mean_images=float(np.mean(images)),
            median_interactions=float(np.median(inters)),
            reduction_fraction=float(1.0 - mean_acquired / total_available),
        )
        return GridPointResult(
            t_meta=t_meta,
            t_image=t_image,
            o1=total_available - mean_acquired,
            o2=abs(full_top3 - top3),
            stats=stats,
        )

    points = grid.points()
    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(eval_point, points))
    else:
        results = [eval_point(p) for p in points]
    return results


# --------------------------------------------------------------------------
# Task calibration
# --------------------------------------------------------------------------


def calibrate_task1(
    cases: Sequence[Case],
    model: ClassifierInterface,
    schema: MetadataSchema,
    ivm: ImageValueModel | None,
    metric: MetricKind,
    epsilon2: float,
    grid: GridSpec | None = None,
    precomputed: list[GridPointResult] | None = None,
    **sweep_options,
) -> tuple[OperatingPoint, list[GridPointResult]]:
    """Max input reduction subject to a performance-drop tolerance.

    Among grid points with O2 <= epsilon2 on the calibration set, returns
    the one maximizing O1, breaking ties by lower median interactions.
    """
    if epsilon2 < 0:
        raise CalibrationError("epsilon2 must be >= 0")
    grid = grid or default_threshold_grid(metric)
    results = precomputed or sweep_thresholds(cases, model, schema, ivm, metric, grid, **sweep_options)
    feasible = [r for r in results if r.o2 <= epsilon2]
    if not feasible:
        best = min(r.o2 for r in results)
        raise CalibrationError(
            f"no grid point satisfies O2 <= {epsilon2}; best achievable O2 is {best:.6f}"
        )
    chosen = max(feasible, key=lambda r: (r.o1, -r.stats.median_interactions))
    point = OperatingPoint(
        t_meta=chosen.t_meta, t_image=chosen.t_image, achieved=chosen.stats, task="task1", epsilon=epsilon2
    )
    return point, results


def calibrate_task2(
    cases: Sequence[Case],
    model: ClassifierInterface,
    schema: MetadataSchema,
    ivm: ImageValueModel | None,
    metric: MetricKind,
    epsilon1: float,
    grid: GridSpec | None = None,
    precomputed: list[GridPointResult] | None = None,
    **sweep_options,
) -> tuple[OperatingPoint, list[GridPointResult]]:
    """Min performance drop subject to a required mean input reduction."""
    if epsilon1 < 0:
        raise CalibrationError("epsilon1 must be >= 0")
    grid = grid or default_threshold_grid(metric)
    results = precomputed or sweep_thresholds(cases, model, schema, ivm, metric, grid, **sweep_options)
    feasible = [r for r in results if r.o1 >= epsilon1]
    if not feasible:
        best = max(r.o1 for r in results)
        raise CalibrationError(
            f"no grid point satisfies O1 >= {epsilon1}; best achievable O1 is {best:.6f}"
        )
    chosen = min(feasible, key=lambda r: (r.o2, -r.o1))
    point = OperatingPoint(
        t_meta=chosen.t_meta, t_image=chosen.t_image, achieved=chosen.stats, task="task2", epsilon=epsilon1
    )
    return point, results


def calibration_report_json(
    point: OperatingPoint, results: Sequence[GridPointResult], grid: GridSpec
) -> str:
    doc = {
        "task": point.task,
        "epsilon": point.epsilon,
        "chosen": point.to_json_dict(),
        "grid": {
            "t_meta_values": list(grid.t_meta_values),
            "t_image_values": list(grid.t_image_values),
        },
        "points": [
            {
                "t_meta": r.t_meta,
                "t_image": r.t_image,
                "o1": r.o1,
                "o2": r.o2,
                "median_interactions": r.stats.median_interactions,
                "top3_accuracy": r.stats.top3_accuracy,
                "mean_meta": r.stats.mean_meta,
                "mean_images": r.stats.mean_images,
            }
            for r in results
        ],
    }
    return json.dumps(doc, indent=2, sort_keys=True)


# --------------------------------------------------------------------------
# MSP operating point
# --------------------------------------------------------------------------


def fit_msp_tau(
    validation_cases: Sequence[Case],
    model: ClassifierInterface,
    schema: MetadataSchema,
    target_mean_images: float,
    seed: int = 0,
    tolerance: float = 0.1,
    max_iterations: int = 60,
) -> float:
    """Binary-search tau until the mean image count matches the target."""
    from .baselines import msp_early_stop_episode

    def mean_images(tau: float) -> float:
        return float(
            np.mean([msp_early_stop_episode(c, model, schema, tau, seed).n_images_acquired for c in validation_cases])
        )

    lo, hi = 0.0, 1.0
    m_lo, m_hi = mean_images(lo), mean_images(hi)
    if abs(m_lo - target_mean_images) <= tolerance:
        return 0.0
    if abs(m_hi - target_mean_images) <= tolerance:
        return 1.0
    if not (m_lo < target_mean_images < m_hi):
        raise CalibrationError(
            f"target mean images {target_mean_images} outside the reachable range [{m_lo}, {m_hi}]"
        )
    for _ in range(max_iterations):
        mid = (lo + hi) / 2.0
        m = mean_images(mid)
        if abs(m - target_mean_images) <= tolerance:
            return mid
        if m < target_mean_images:
            lo = mid
        else:
            hi = mid
    raise CalibrationError(
        f"mean image count {target_mean_images} +/- {tolerance} is unreachable (stopping is step-valued); "
        f"closest bracket [{lo}, {hi}]"
    )
