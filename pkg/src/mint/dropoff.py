"""Monte Carlo simulation of user abandonment during the submission flow.

Each metadata question lives on a submission screen; a case touches a
screen when at least one of its questions was asked. Every touched screen
drops the user once with its screen probability, and each requested image
applies a per-image probability derived from the nominal three-image flow.
Comparisons reuse common random numbers (one uniform per case/screen/image
slot shared across scenarios), which makes subset dominance exact per
paired simulation: a user who survives the superset flow always survives
the subset flow.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .core import MetadataSchema
from .engine import EpisodeTranscript
from .evalharness import top_indices


class DropoffError(ValueError):
    pass


@dataclass(frozen=True)
class ScreenSpec:
    screen_id: int
    p_drop: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.p_drop <= 1.0:
            raise DropoffError(f"p_drop must be in [0,1], got {self.p_drop}")


@dataclass(frozen=True)
class FlowModel:
    screens: tuple[ScreenSpec, ...]
    field_to_screen: Mapping[int, int]
    images_p_drop: float = 0.02
    n_images_nominal: int = 3

    def __post_init__(self) -> None:
        if not 0.0 <= self.images_p_drop <= 1.0:
            raise DropoffError(f"images_p_drop must be in [0,1], got {self.images_p_drop}")
        screen_ids = {s.screen_id for s in self.screens}
        if len(screen_ids) != len(self.screens):
            raise DropoffError("duplicate screen ids")
        for fid, sid in self.field_to_screen.items():
            if sid not in screen_ids:
                raise DropoffError(f"field {fid} maps to unknown screen {sid}")

    @property
    def per_image_drop_prob(self) -> float:
        """q solving (1-q)^nominal = 1 - images_p_drop: the whole-flow image
        drop probability spread equally over the nominal image count."""
        return 1.0 - (1.0 - self.images_p_drop) ** (1.0 / self.n_images_nominal)

    @classmethod
    def from_schema(
        cls, schema: MetadataSchema, p_drop: float = 0.01, images_p_drop: float = 0.02
    ) -> "FlowModel":
        screens = tuple(ScreenSpec(screen_id=sid, p_drop=p_drop) for sid in schema.screen_ids)
        mapping = {f.id: f.screen_id for f in schema.fields}
        return cls(screens=screens, field_to_screen=mapping, images_p_drop=images_p_drop)

    def to_json_dict(self) -> dict:
        return {
            "screens": [{"screen_id": s.screen_id, "p_drop": s.p_drop} for s in self.screens],
            "field_to_screen": {str(k): v for k, v in self.field_to_screen.items()},
            "images_p_drop": self.images_p_drop,
            "n_images_nominal": self.n_images_nominal,
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "FlowModel":
        return cls(
            screens=tuple(ScreenSpec(int(s["screen_id"]), float(s["p_drop"])) for s in doc["screens"]),
            field_to_screen={int(k): int(v) for k, v in doc["field_to_screen"].items()},
            images_p_drop=float(doc.get("images_p_drop", 0.02)),
            n_images_nominal=int(doc.get("n_images_nominal", 3)),
        )

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "FlowModel":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json_dict(json.load(fh))


@dataclass(frozen=True)
class RateSummary:
    mean: float
    ci_low: float  # 2.5th percentile over simulations
    ci_high: float  # 97.5th percentile over simulations


@dataclass(frozen=True)
class SimulationResult:
    drop_rate: RateSummary
    correct_shown_rate: RateSummary
    per_sim_drop: np.ndarray
    per_sim_correct: np.ndarray


@dataclass(frozen=True)
class ComparisonResult:
    left: SimulationResult
    right: SimulationResult
    drop_delta: RateSummary  # left minus right, paired per simulation
    correct_delta: RateSummary
    subset_relation_holds: bool  # left touches a subset of right for every case
    dominance_fraction: float  # fraction of paired sims with drop delta <= 0


def _summary(per_sim: np.ndarray) -> RateSummary:
    return RateSummary(
        mean=float(np.mean(per_sim)),
        ci_low=float(np.percentile(per_sim, 2.5)),
        ci_high=float(np.percentile(per_sim, 97.5)),
    )


def _case_exposure(transcripts, flow: FlowModel) -> tuple[list[set[int]], list[int]]:
    touched, n_images = [], []
    for t in transcripts:
        screens = set()
        for fid in t.acquired_field_ids():
            if fid not in flow.field_to_screen:
                raise DropoffError(f"field {fid} has no screen assignment")
            screens.add(flow.field_to_screen[fid])
        touched.append(screens)
        n_images.append(t.n_images_acquired)
    return touched, n_images


def _uniform_block(case_ids: Sequence[int], n_slots: int, n_sims: int, seed: int) -> np.ndarray:
    """One uniform per (case, slot, simulation), a pure function of the case
    id set and the seed; scenarios sharing cases share draws (CRN)."""
    rng = np.random.default_rng([seed, len(case_ids), n_slots])
    return rng.random((len(case_ids), n_slots, n_sims))


def _dropped_matrix(
    transcripts: Sequence[EpisodeTranscript],
    flow: FlowModel,
    uniforms: np.ndarray,
    screen_order: Sequence[int],
) -> np.ndarray:
    """(n_cases, n_sims) boolean: did the case drop in each simulation."""
    touched, n_images = _case_exposure(transcripts, flow)
    p_by_screen = {s.screen_id: s.p_drop for s in flow.screens}
    q = flow.per_image_drop_prob
    n_screens = len(screen_order)
    thresholds = np.zeros((len(transcripts), uniforms.shape[1]))
    for i, (screens, n_img) in enumerate(zip(touched, n_images)):
        for j, sid in enumerate(screen_order):
            if sid in screens:
                thresholds[i, j] = p_by_screen[sid]
        thresholds[i, n_screens : n_screens + n_img] = q
    return (uniforms < thresholds[:, :, None]).any(axis=1)


def _correct_flags(transcripts, labels, k) -> np.ndarray:
    flags = []
    for t, label in zip(transcripts, labels):
        probs = np.asarray(t.final_prediction)
        flags.append(label in top_indices(probs, min(k, len(probs))))
    return np.asarray(flags, dtype=bool)


def _result_from_dropped(dropped: np.ndarray, correct: np.ndarray) -> SimulationResult:
    per_sim_drop = dropped.mean(axis=0)
    shown_correct = (~dropped) & correct[:, None]
    per_sim_correct = shown_correct.mean(axis=0)
    return SimulationResult(
        drop_rate=_summary(per_sim_drop),
        correct_shown_rate=_summary(per_sim_correct),
        per_sim_drop=per_sim_drop,
        per_sim_correct=per_sim_correct,
    )


def _ordered(transcripts) -> list[EpisodeTranscript]:
    return sorted(transcripts, key=lambda t: t.case_id)


def _slots(transcripts, flow: FlowModel) -> tuple[list[int], int]:
    screen_order = sorted(s.screen_id for s in flow.screens)
    max_images = max(t.n_images_available for t in transcripts)
    return screen_order, len(screen_order) + max_images


def simulate(
    transcripts: Sequence[EpisodeTranscript],
    flow: FlowModel,
    n_sims: int,
    seed: int,
    labels: Sequence[int] | None = None,
    k: int = 3,
) -> SimulationResult:
    """Drop-off and correct-result rates with percentile intervals over sims."""
    if n_sims < 1:
        raise DropoffError("n_sims must be >= 1")
    transcripts = _ordered(transcripts)
    if labels is None:
        labels = [t.label for t in transcripts]
    screen_order, n_slots = _slots(transcripts, flow)
    uniforms = _uniform_block([t.case_id for t in transcripts], n_slots, n_sims, seed)
    dropped = _dropped_matrix(transcripts, flow, uniforms, screen_order)
    return _result_from_dropped(dropped, _correct_flags(transcripts, labels, k))


def compare(
    left_transcripts: Sequence[EpisodeTranscript],
    right_transcripts: Sequence[EpisodeTranscript],
    flow: FlowModel,
    n_sims: int,
    seed: int,
    labels: Sequence[int] | None = None,
    k: int = 3,
) -> ComparisonResult:
    """Paired comparison under common random numbers (left minus right)."""
    left = _ordered(left_transcripts)
    right = _ordered(right_transcripts)
    if [t.case_id for t in left] != [t.case_id for t in right]:
        raise DropoffError("transcript sets cover different cases")
    if labels is None:
        labels = [t.label for t in left]
    screen_order, n_slots_left = _slots(left, flow)
    _, n_slots_right = _slots(right, flow)
    n_slots = max(n_slots_left, n_slots_right)
    uniforms = _uniform_block([t.case_id for t in left], n_slots, n_sims, seed)
    dropped_left = _dropped_matrix(left, flow, uniforms, screen_order)
    dropped_right = _dropped_matrix(right, flow, uniforms, screen_order)
    result_left = _result_from_dropped(dropped_left, _correct_flags(left, labels, k))
    result_right = _result_from_dropped(dropped_right, _correct_flags(right, labels, k))

    touched_l, imgs_l = _case_exposure(left, flow)
    touched_r, imgs_r = _case_exposure(right, flow)
    subset = all(tl <= tr and il <= ir for tl, tr, il, ir in zip(touched_l, touched_r, imgs_l, imgs_r))
    drop_delta = result_left.per_sim_drop - result_right.per_sim_drop
    correct_delta = result_left.per_sim_correct - result_right.per_sim_correct
    return ComparisonResult(
        left=result_left,
        right=result_right,
        drop_delta=_summary(drop_delta),
        correct_delta=_summary(correct_delta),
        subset_relation_holds=subset,
        dominance_fraction=float(np.mean(drop_delta <= 0.0)),
    )


def closed_form_drop_rate(transcripts: Sequence[EpisodeTranscript], flow: FlowModel) -> float:
    """Expected drop rate under independent screens (large-sim limit)."""
    touched, n_images = _case_exposure(_ordered(transcripts), flow)
    p_by_screen = {s.screen_id: s.p_drop for s in flow.screens}
    q = flow.per_image_drop_prob
    rates = []
    for screens, n_img in zip(touched, n_images):
        survive = (1.0 - q) ** n_img
        for sid in screens:
            survive *= 1.0 - p_by_screen[sid]
        rates.append(1.0 - survive)
    return float(np.mean(rates))
