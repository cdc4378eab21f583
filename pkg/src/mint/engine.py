"""Greedy value-of-information acquisition engine.

The engine wraps an opaque classifier and sequences input acquisition one
step at a time. At each step it scores every remaining candidate input:
metadata fields by simulating all plausible answers (every categorical
option including Unknown, or the schema's p10/p50/p90 for scalars) and
averaging the divergence between the current and hypothetical predictive
distributions; prospective images through a small learned regressor over
distribution statistics. Candidates are compared after subtracting their
class threshold; the best non-negative candidate is acquired, otherwise
the episode stops.

``EpisodeDriver`` is the stepping core: batch simulation auto-answers from
a bound case, while the HTTP service feeds it user answers. Both paths
produce identical transcripts for identical answer sequences.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .core import (
    AcquisitionState,
    AnswerValue,
    Case,
    CategoricalAnswer,
    ClassifierInterface,
    FieldSpec,
    MetadataSchema,
    PredictiveDistribution,
    ScalarAnswer,
    ScalarUnknown,
    ViewType,
    VIEW_ORDER,
    answer_from_json,
    answer_to_json,
    encode_metadata,
    pool_image_embeddings,
)
from .divergence import MetricKind, entropy_bits, metric_batch

STOP_BELOW_THRESHOLD = "all_values_below_threshold"
STOP_EXHAUSTED = "inputs_exhausted"
STOP_STEP_CAP = "step_cap"

FIRST_LISTED = "first_listed"
SEEDED_RANDOM = "seeded_random"


class EngineError(RuntimeError):
    pass


@dataclass(frozen=True)
class EngineConfig:
    metric: MetricKind = MetricKind.JS
    t_meta: float = 0.0
    t_image: float = 0.0
    instruction_mode: bool = False
    tie_break: str = "lowest_field_id"
    max_steps: int | None = None
    kl_reverse: bool = False  # score KL(p_new || p_current) instead of the default order

    def __post_init__(self) -> None:
        if np.isnan(self.t_meta) or np.isnan(self.t_image):
            raise ValueError("thresholds must not be NaN")
        if self.tie_break != "lowest_field_id":
            raise ValueError(f"unsupported tie break {self.tie_break!r}")


@dataclass(frozen=True)
class Action:
    """Exactly one of: acquire a metadata field, acquire an image, or stop."""

    kind: str  # "acquire_metadata" | "acquire_image" | "stop"
    field_id: int | None = None
    view: ViewType | None = None  # None on image actions means "any view"
    stop_reason: str | None = None

    @classmethod
    def acquire_metadata(cls, field_id: int) -> "Action":
        return cls(kind="acquire_metadata", field_id=field_id)

    @classmethod
    def acquire_image(cls, view: ViewType | None) -> "Action":
        return cls(kind="acquire_image", view=view)

    @classmethod
    def stop(cls, reason: str) -> "Action":
        return cls(kind="stop", stop_reason=reason)

    def to_json_dict(self) -> dict:
        out: dict = {"kind": self.kind}
        if self.kind == "acquire_metadata":
            out["field_id"] = self.field_id
        elif self.kind == "acquire_image":
            out["view"] = self.view.value if self.view is not None else "any"
        else:
            out["stop_reason"] = self.stop_reason
        return out

    @classmethod
    def from_json_dict(cls, doc: dict) -> "Action":
        kind = doc["kind"]
        if kind == "acquire_metadata":
            return cls.acquire_metadata(int(doc["field_id"]))
        if kind == "acquire_image":
            view = doc.get("view", "any")
            return cls.acquire_image(None if view == "any" else ViewType(view))
        return cls.stop(doc["stop_reason"])


@dataclass(frozen=True)
class CandidateValue:
    """One candidate's raw and thresholded value at a decision point."""

    kind: str  # "meta" | "image"
    field_id: int | None
    view: ViewType | None  # None = "any" for image candidates
    raw: float
    thresholded: float
    eligible: bool

    def to_json_dict(self) -> dict:
        out: dict = {"kind": self.kind, "raw": self.raw, "thresholded": self.thresholded, "eligible": self.eligible}
        if self.kind == "meta":
            out["field_id"] = self.field_id
        else:
            out["view"] = self.view.value if self.view is not None else "any"
        return out

    @classmethod
    def from_json_dict(cls, doc: dict) -> "CandidateValue":
        view = doc.get("view")
        return cls(
            kind=doc["kind"],
            field_id=doc.get("field_id"),
            view=None if view in (None, "any") else ViewType(view),
            raw=float(doc["raw"]),
            thresholded=float(doc["thresholded"]),
            eligible=bool(doc["eligible"]),
        )


# --------------------------------------------------------------------------
# Image value model
# --------------------------------------------------------------------------

IMAGE_FEATURE_WIDTH = 6 + len(VIEW_ORDER)


def image_value_features(
    entropy: float, top1: float, top2: float, n_images: int, n_meta: int, view: ViewType | None
) -> np.ndarray:
    """Feature vector for the image value regressor.

    ``view=None`` is the "any image" token, encoded as the uniform mix over
    view slots so the linear model scores the average over view types.
    """
    feats = np.zeros(IMAGE_FEATURE_WIDTH, dtype=np.float64)
    feats[0] = entropy
    feats[1] = top1
    feats[2] = top2
    feats[3] = top1 - top2
    feats[4] = float(n_images)
    feats[5] = float(n_meta)
    if view is None:
        feats[6:] = 1.0 / len(VIEW_ORDER)
    else:
        feats[6 + VIEW_ORDER.index(view)] = 1.0
    return feats


@dataclass(frozen=True)
class ImageValueModel:
    """Linear regressor predicting the expected loss reduction of one more image."""

    weights: np.ndarray  # (IMAGE_FEATURE_WIDTH,)
    bias: float

    def __post_init__(self) -> None:
        w = np.asarray(self.weights, dtype=np.float64)
        object.__setattr__(self, "weights", w)
        if w.shape != (IMAGE_FEATURE_WIDTH,):
            raise ValueError(f"image value model expects {IMAGE_FEATURE_WIDTH} weights, got {w.shape}")

    def predict_value(self, features: np.ndarray) -> float:
        return float(self.weights @ np.asarray(features, dtype=np.float64) + self.bias)

    def to_json_dict(self) -> dict:
        return {"weights": [float(x) for x in self.weights], "bias": self.bias}

    @classmethod
    def from_json_dict(cls, doc: dict) -> "ImageValueModel":
        return cls(weights=np.asarray(doc["weights"], dtype=np.float64), bias=float(doc["bias"]))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_dict(), fh, separators=(",", ":"), sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "ImageValueModel":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json_dict(json.load(fh))


def zero_image_value_model(bias: float = 0.0) -> ImageValueModel:
    return ImageValueModel(weights=np.zeros(IMAGE_FEATURE_WIDTH), bias=bias)


def reveal_case_image(case: Case, used: set[int], requested: ViewType | None) -> tuple[int, ViewType, bool]:
    """First unused image of the requested view; falls back to the first
    unused image of any view (flagged) when that view is absent."""
    unused = [i for i in range(len(case.images)) if i not in used]
    if not unused:
        raise EngineError("no unused images remain")
    if requested is not None:
        for i in unused:
            if case.images[i].view == requested:
                return i, case.images[i].view, False
        return unused[0], case.images[unused[0]].view, True
    return unused[0], case.images[unused[0]].view, False


def enumerate_image_value_examples(
    cases: Sequence[Case],
    model: ClassifierInterface,
    schema: MetadataSchema,
    seed: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Regression dataset for the image value model.

    For every case, images are shuffled once (per-case seeded stream); for
    every prefix of that order and every view type still unused, one example
    records the state features and the realized cross-entropy reduction from
    adding the next unused image of that view. Metadata is withheld so the
    features reflect image-only states.
    """
    rows: list[np.ndarray] = []
    targets: list[float] = []
    for case in sorted(cases, key=lambda c: c.case_id):
        rng = np.random.default_rng([seed, case.case_id])
        order = [int(i) for i in rng.permutation(len(case.images))]
        for k in range(1, len(case.images)):
            prefix = sorted(order[:k])
            embeddings = [case.images[i].embedding for i in prefix]
            p = model.predict(embeddings, {}, schema)
            probs_sorted = np.sort(p.probs)[::-1]
            ce_prefix = -float(np.log(max(p.probs[case.label], 1e-300)))
            ent = entropy_bits(p.probs)
            remaining = order[k:]
            for view in VIEW_ORDER:
                next_idx = next((i for i in remaining if case.images[i].view == view), None)
                if next_idx is None:
                    continue
                extended = sorted(prefix + [next_idx])
                p_new = model.predict([case.images[i].embedding for i in extended], {}, schema)
                ce_new = -float(np.log(max(p_new.probs[case.label], 1e-300)))
                rows.append(
                    image_value_features(ent, float(probs_sorted[0]), float(probs_sorted[1]), k, 0, view)
                )
                targets.append(ce_prefix - ce_new)
    if not rows:
        raise EngineError("no image value examples could be enumerated (need cases with >= 2 images)")
    return np.stack(rows), np.asarray(targets, dtype=np.float64)


def train_image_value_model(
    cases: Sequence[Case],
    model: ClassifierInterface,
    schema: MetadataSchema,
    seed: int,
) -> ImageValueModel:
    """Least-squares fit of the linear image value regressor."""
    rows, targets = enumerate_image_value_examples(cases, model, schema, seed)
    design = np.concatenate([rows, np.ones((len(rows), 1))], axis=1)
    solution, *_ = np.linalg.lstsq(design, targets, rcond=None)
    return ImageValueModel(weights=solution[:-1], bias=float(solution[-1]))


# --------------------------------------------------------------------------
# State evaluation (shared by the batch engine and the live service)
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class StateEval:
    """Raw values and prediction for one acquired-input state."""

    prediction: PredictiveDistribution
    meta_raw: dict[int, float]
    entropy: float
    top1: float
    top2: float


def field_branch_answers(spec: FieldSpec) -> list[AnswerValue]:
    """Hypothetical answers scored for a field: all options incl. Unknown, or
    the schema's stored percentiles for scalar fields."""
    if spec.is_categorical:
        return [CategoricalAnswer(index=i) for i in range(spec.kind.cardinality + 1)]
    return [ScalarAnswer(value=v) for v in (spec.kind.p10, spec.kind.p50, spec.kind.p90)]


def evaluate_state(
    model: ClassifierInterface,
    schema: MetadataSchema,
    answers: Mapping[int, AnswerValue],
    embeddings: Sequence[np.ndarray],
    candidate_fields: Sequence[int],
    metric: MetricKind,
    kl_reverse: bool = False,
) -> StateEval:
    """Prediction plus the raw acquisition value of every candidate field.

    A field's raw value is the mean divergence between the current
    prediction and the prediction after each hypothetical answer. Uses the
    classifier's batched path when it offers one.
    """
    if len(embeddings) == 0:
        raise EngineError("value estimation requires at least one acquired image")
    prediction = model.predict(embeddings, answers, schema)
    p_current = prediction.probs

    branch_specs: list[tuple[int, list[AnswerValue]]] = []
    for fid in candidate_fields:
        if fid in answers:
            raise EngineError(f"field {fid} is already acquired")
        branch_specs.append((fid, field_branch_answers(schema.field(fid))))

    meta_raw: dict[int, float] = {}
    if branch_specs:
        # A branch whose encoded input equals the current state's encoding
        # (the Unknown option, or a scalar branch at the placeholder) cannot
        # move a deterministic classifier: its value is exactly 0. Skipping
        # those rows also keeps the batched path free of sqrt-amplified
        # rounding noise on identical inputs.
        base = encode_metadata(answers, schema)
        layout: list[tuple[int, list[float | None], list[np.ndarray]]] = []
        rows: list[np.ndarray] = []
        for fid, branches in branch_specs:
            offset = schema.block_offset(fid)
            width = schema.field(fid).encoded_width
            branch_values: list[float | None] = []
            pending: list[np.ndarray] = []
            for ans in branches:
                row = base.copy()
                row[offset : offset + width] = encode_metadata({fid: ans}, schema)[offset : offset + width]
                if np.array_equal(row, base):
                    branch_values.append(0.0)
                else:
                    branch_values.append(None)
                    pending.append(row)
            layout.append((fid, branch_values, pending))
            rows.extend(pending)

        if rows:
            if hasattr(model, "predict_encoded_batch"):
                pooled = pool_image_embeddings(embeddings)
                branch_probs = model.predict_encoded_batch(pooled, np.stack(rows))
            else:
                preds = []
                pos = 0
                for fid, branch_values, pending in layout:
                    branches = field_branch_answers(schema.field(fid))
                    for ans, val in zip(branches, branch_values):
                        if val is None:
                            extended = dict(answers)
                            extended[fid] = ans
                            preds.append(model.predict(embeddings, extended, schema).probs)
                branch_probs = np.stack(preds)
            if metric == MetricKind.KL and kl_reverse:
                values = np.array(
                    [metric_batch(metric, branch_probs[i], p_current)[0] for i in range(len(branch_probs))]
                )
            else:
                values = metric_batch(metric, p_current, branch_probs)
        else:
            values = np.zeros(0)

        pos = 0
        for fid, branch_values, pending in layout:
            filled = []
            for v in branch_values:
                if v is None:
                    filled.append(float(values[pos]))
                    pos += 1
                else:
                    filled.append(v)
            meta_raw[fid] = float(np.mean(filled))

    probs_sorted = np.sort(p_current)[::-1]
    top2 = float(probs_sorted[1]) if len(probs_sorted) > 1 else 0.0
    return StateEval(
        prediction=prediction,
        meta_raw=meta_raw,
        entropy=entropy_bits(p_current),
        top1=float(probs_sorted[0]),
        top2=top2,
    )


class CaseEvaluator:
    """Memoizes state evaluations for one case.

    Valid only in simulation, where the acquired answer of a field is
    determined by the case, so an acquired-set pair identifies the state.
    Shared across threshold-grid points during calibration so overlapping
    trajectory prefixes are evaluated once.
    """

    def __init__(
        self,
        case: Case,
        model: ClassifierInterface,
        schema: MetadataSchema,
        metric: MetricKind,
        kl_reverse: bool = False,
    ):
        self.case = case
        self.model = model
        self.schema = schema
        self.metric = metric
        self.kl_reverse = kl_reverse
        self._cache: dict[tuple[frozenset[int], frozenset[int]], StateEval] = {}

    def evaluate(self, field_ids: frozenset[int], image_indices: frozenset[int]) -> StateEval:
        key = (field_ids, image_indices)
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        answers = {fid: self.case.metadata[fid] for fid in sorted(field_ids)}
        embeddings = [self.case.images[i].embedding for i in sorted(image_indices)]
        candidates = [f.id for f in self.schema.fields if f.id not in field_ids]
        result = evaluate_state(
            self.model, self.schema, answers, embeddings, candidates, self.metric, self.kl_reverse
        )
        self._cache[key] = result
        return result


# --------------------------------------------------------------------------
# Public value-estimation operations
# --------------------------------------------------------------------------


def estimate_metadata_value(
    case: Case,
    state: AcquisitionState,
    field_spec: FieldSpec,
    model: ClassifierInterface,
    schema: MetadataSchema,
    metric: MetricKind,
    kl_reverse: bool = False,
) -> float:
    """Raw (un-thresholded) acquisition value of one metadata field."""
    if field_spec.id in state.acquired_fields:
        raise EngineError(f"field {field_spec.id} is already acquired")
    if state.n_images < 1:
        raise EngineError("value estimation requires at least one acquired image")
    embeddings = [case.images[i].embedding for i in state.image_indices()]
    result = evaluate_state(
        model, schema, state.acquired_fields, embeddings, [field_spec.id], metric, kl_reverse
    )
    return result.meta_raw[field_spec.id]


def estimate_image_value(state: AcquisitionState, view: ViewType | None, ivm: ImageValueModel) -> float:
    """Raw (un-thresholded) predicted value of acquiring one more image."""
    if state.current_prediction is None:
        raise EngineError("state has no cached prediction")
    probs = state.current_prediction.probs
    probs_sorted = np.sort(probs)[::-1]
    top2 = float(probs_sorted[1]) if len(probs_sorted) > 1 else 0.0
    feats = image_value_features(
        entropy_bits(probs), float(probs_sorted[0]), top2, state.n_images, state.n_meta, view
    )
    return ivm.predict_value(feats)


# --------------------------------------------------------------------------
# Decision step
# --------------------------------------------------------------------------


def _sort_value(raw: float, threshold: float) -> tuple[bool, float]:
    """Eligibility and comparison value under a class threshold.

    Finite thresholds follow the literal rule: value minus threshold,
    eligible when non-negative. Infinite thresholds are calibration
    anchors: -inf means always eligible and ranked by raw value (never
    stop), +inf means never eligible (never acquire).
    """
    if threshold == -np.inf:
        return True, raw
    if threshold == np.inf:
        return False, -np.inf
    t = raw - threshold
    return t >= 0.0, t


def decide(
    state_eval: StateEval,
    candidate_fields: Sequence[int],
    image_views: Sequence[ViewType | None],
    config: EngineConfig,
    ivm: ImageValueModel | None,
    n_images: int,
    n_meta: int,
) -> tuple[Action, tuple[CandidateValue, ...]]:
    """Threshold, rank, and pick the next action.

    Candidates are scanned in canonical order (metadata by ascending field
    id, then image views); ties keep the earliest candidate, so equal-value
    metadata resolves to the lowest field id and images sort after metadata.
    """
    values: list[CandidateValue] = []
    best: CandidateValue | None = None
    best_sort = -np.inf

    for fid in candidate_fields:
        raw = state_eval.meta_raw[fid]
        eligible, sort_value = _sort_value(raw, config.t_meta)
        cand = CandidateValue(
            kind="meta", field_id=fid, view=None, raw=raw, thresholded=raw - config.t_meta, eligible=eligible
        )
        values.append(cand)
        if eligible and sort_value > best_sort:
            best, best_sort = cand, sort_value

    for view in image_views:
        feats = image_value_features(
            state_eval.entropy, state_eval.top1, state_eval.top2, n_images, n_meta, view
        )
        raw = ivm.predict_value(feats) if ivm is not None else 0.0
        eligible, sort_value = _sort_value(raw, config.t_image)
        cand = CandidateValue(
            kind="image", field_id=None, view=view, raw=raw, thresholded=raw - config.t_image, eligible=eligible
        )
        values.append(cand)
        if eligible and sort_value > best_sort:
            best, best_sort = cand, sort_value

    if best is None:
        action = Action.stop(STOP_BELOW_THRESHOLD)
    elif best.kind == "meta":
        action = Action.acquire_metadata(best.field_id)
    else:
        action = Action.acquire_image(best.view)
    return action, tuple(values)


# --------------------------------------------------------------------------
# Transcripts
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TranscriptStep:
    step: int
    n_images_before: int
    n_meta_before: int
    values: tuple[CandidateValue, ...]
    action: Action
    revealed: dict | None  # {"field_id", "answer"} or {"image_index", "view", "substituted"}
    prediction_after: tuple[float, ...] | None


@dataclass(frozen=True)
class EpisodeTranscript:
    case_id: int
    label: int | None
    policy: str
    setup_images: tuple[tuple[int, str], ...]  # (image index, view token) acquired before the loop
    initial_prediction: tuple[float, ...]
    steps: tuple[TranscriptStep, ...]
    final_prediction: tuple[float, ...]
    stop_reason: str
    n_images_acquired: int
    n_meta_acquired: int
    n_images_available: int
    n_meta_available: int

    @property
    def n_interactions(self) -> int:
        """Loop acquisitions (setup images are not decisions)."""
        return sum(1 for s in self.steps if s.action.kind != "stop")

    @property
    def total_acquired(self) -> int:
        return self.n_images_acquired + self.n_meta_acquired

    @property
    def total_available(self) -> int:
        return self.n_images_available + self.n_meta_available

    def predictions_by_interaction(self) -> list[tuple[float, ...]]:
        """Prediction after 0, 1, ... interactions (initial state first)."""
        preds = [self.initial_prediction]
        preds.extend(s.prediction_after for s in self.steps if s.action.kind != "stop")
        return preds

    def acquired_field_ids(self) -> list[int]:
        return [s.action.field_id for s in self.steps if s.action.kind == "acquire_metadata"]


def transcript_to_records(t: EpisodeTranscript) -> list[dict]:
    records: list[dict] = [
        {
            "type": "episode",
            "case_id": t.case_id,
            "label": t.label,
            "policy": t.policy,
            "setup_images": [[idx, view] for idx, view in t.setup_images],
            "initial_prediction": list(t.initial_prediction),
            "n_images_available": t.n_images_available,
            "n_meta_available": t.n_meta_available,
        }
    ]
    for s in t.steps:
        records.append(
            {
                "type": "step",
                "case_id": t.case_id,
                "step": s.step,
                "n_images": s.n_images_before,
                "n_meta": s.n_meta_before,
                "values": [v.to_json_dict() for v in s.values],
                "action": s.action.to_json_dict(),
                "revealed": s.revealed,
                "prediction_after": list(s.prediction_after) if s.prediction_after is not None else None,
            }
        )
    records.append(
        {
            "type": "final",
            "case_id": t.case_id,
            "stop_reason": t.stop_reason,
            "final_prediction": list(t.final_prediction),
            "n_images_acquired": t.n_images_acquired,
            "n_meta_acquired": t.n_meta_acquired,
        }
    )
    return records


def transcripts_to_jsonl(transcripts: Iterable[EpisodeTranscript]) -> str:
    lines = []
    for t in transcripts:
        for rec in transcript_to_records(t):
            lines.append(json.dumps(rec, separators=(",", ":")))
    return "\n".join(lines) + "\n"


def save_transcripts(transcripts: Iterable[EpisodeTranscript], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(transcripts_to_jsonl(transcripts))


def transcripts_from_records(records: Iterable[dict]) -> list[EpisodeTranscript]:
    transcripts = []
    header: dict | None = None
    steps: list[TranscriptStep] = []
    for rec in records:
        if rec["type"] == "episode":
            header = rec
            steps = []
        elif rec["type"] == "step":
            steps.append(
                TranscriptStep(
                    step=int(rec["step"]),
                    n_images_before=int(rec["n_images"]),
                    n_meta_before=int(rec["n_meta"]),
                    values=tuple(CandidateValue.from_json_dict(v) for v in rec["values"]),
                    action=Action.from_json_dict(rec["action"]),
                    revealed=rec["revealed"],
                    prediction_after=tuple(rec["prediction_after"]) if rec["prediction_after"] else None,
                )
            )
        elif rec["type"] == "final":
            assert header is not None, "final record before episode header"
            transcripts.append(
                EpisodeTranscript(
                    case_id=int(header["case_id"]),
                    label=header["label"],
                    policy=header["policy"],
                    setup_images=tuple((int(i), v) for i, v in header["setup_images"]),
                    initial_prediction=tuple(header["initial_prediction"]),
                    steps=tuple(steps),
                    final_prediction=tuple(rec["final_prediction"]),
                    stop_reason=rec["stop_reason"],
                    n_images_acquired=int(rec["n_images_acquired"]),
                    n_meta_acquired=int(rec["n_meta_acquired"]),
                    n_images_available=int(header["n_images_available"]),
                    n_meta_available=int(header["n_meta_available"]),
                )
            )
    return transcripts


def load_transcripts(path) -> list[EpisodeTranscript]:
    with open(path, "r", encoding="utf-8") as fh:
        records = [json.loads(line) for line in fh if line.strip()]
    return transcripts_from_records(records)


# --------------------------------------------------------------------------
# Episode driver
# --------------------------------------------------------------------------


class EpisodeDriver:
    """Steps one acquisition episode; the service feeds it user answers.

    Simulated mode binds a case: answers and revealed images come from the
    case, and `auto_step` drives the whole episode. Live mode starts empty
    and waits for uploaded image embeddings and user answers.
    """

    def __init__(
        self,
        model: ClassifierInterface,
        schema: MetadataSchema,
        config: EngineConfig,
        ivm: ImageValueModel | None = None,
        *,
        case: Case | None = None,
        policy_name: str = "mint",
        first_image_policy: str = FIRST_LISTED,
        episode_seed: int = 0,
        images_upfront: bool = False,
        meta_budget: int | None = None,
        image_budget: int | None = None,
        live_max_images: int = 6,
        evaluator: CaseEvaluator | None = None,
    ):
        self.model = model
        self.schema = schema
        self.config = config
        self.ivm = ivm
        self.case = case
        self.policy_name = policy_name
        self.meta_budget = meta_budget
        self.image_budget = image_budget
        self.live_max_images = live_max_images

        self.answers: dict[int, AnswerValue] = {}
        self.acquired_images: list[tuple[int, ViewType | None]] = []
        self._live_embeddings: list[np.ndarray] = []
        self._steps: list[TranscriptStep] = []
        self._setup_images: list[tuple[int, str]] = []
        self.stop_reason: str | None = None
        self.prediction: PredictiveDistribution | None = None
        self.pending_action: Action | None = None
        self.pending_values: tuple[CandidateValue, ...] = ()
        self._initial_prediction: tuple[float, ...] | None = None

        if case is not None:
            self._evaluator = evaluator or CaseEvaluator(
                case, model, schema, config.metric, kl_reverse=config.kl_reverse
            )
            if images_upfront:
                setup = list(range(len(case.images)))
            elif first_image_policy == FIRST_LISTED:
                setup = [0]
            elif first_image_policy == SEEDED_RANDOM:
                rng = np.random.default_rng([episode_seed, case.case_id])
                setup = [int(rng.integers(0, len(case.images)))]
            else:
                raise ValueError(f"unknown first image policy {first_image_policy!r}")
            for idx in setup:
                self.acquired_images.append((idx, None))
                self._setup_images.append((idx, case.images[idx].view.value))
            self._refresh(initial=True)
        else:
            self._evaluator = None
            # Live mode: the first upload starts the episode.
            self.pending_action = Action.acquire_image(None)
            self.pending_values = ()

    # -- state access ------------------------------------------------------

    @property
    def finished(self) -> bool:
        return self.stop_reason is not None

    @property
    def n_images(self) -> int:
        return len(self.acquired_images)

    @property
    def n_meta(self) -> int:
        return len(self.answers)

    def acquisition_state(self) -> AcquisitionState:
        return AcquisitionState(
            case_ref=self.case.case_id if self.case is not None else -1,
            acquired_images=list(self.acquired_images),
            acquired_fields=dict(self.answers),
            current_prediction=self.prediction,
        )

    def _embeddings(self) -> list[np.ndarray]:
        if self.case is not None:
            return [self.case.images[i].embedding for i in sorted(i for i, _ in self.acquired_images)]
        return list(self._live_embeddings)

    # -- decision ----------------------------------------------------------

    def _candidate_fields(self) -> list[int]:
        if self.meta_budget is not None and self.n_meta >= self.meta_budget:
            return []
        return [f.id for f in self.schema.fields if f.id not in self.answers]

    def _image_views(self) -> list[ViewType | None]:
        if self.image_budget is not None and self.n_images >= self.image_budget:
            return []
        if self.case is not None:
            used = {i for i, _ in self.acquired_images}
            if len(used) >= len(self.case.images):
                return []
        elif self.n_images >= self.live_max_images:
            return []
        if self.config.instruction_mode:
            return list(VIEW_ORDER)
        return [None]

    def _refresh(self, initial: bool = False) -> None:
        """Recompute prediction and the pending action for the current state."""
        candidate_fields = self._candidate_fields()
        if self.case is not None:
            field_key = frozenset(self.answers)
            image_key = frozenset(i for i, _ in self.acquired_images)
            state_eval = self._evaluator.evaluate(field_key, image_key)
            if candidate_fields != sorted(state_eval.meta_raw):
                state_eval = StateEval(
                    prediction=state_eval.prediction,
                    meta_raw={fid: state_eval.meta_raw[fid] for fid in candidate_fields},
                    entropy=state_eval.entropy,
                    top1=state_eval.top1,
                    top2=state_eval.top2,
                )
        else:
            state_eval = evaluate_state(
                self.model,
                self.schema,
                self.answers,
                self._embeddings(),
                candidate_fields,
                self.config.metric,
                self.config.kl_reverse,
            )
        self.prediction = state_eval.prediction
        if initial:
            self._initial_prediction = tuple(float(x) for x in state_eval.prediction.probs)

        image_views = self._image_views()
        if not candidate_fields and not image_views:
            self._record_stop(STOP_EXHAUSTED, ())
            return
        if self.config.max_steps is not None and self._acquisition_count() >= self.config.max_steps:
            self._record_stop(STOP_STEP_CAP, ())
            return
        action, values = decide(
            state_eval, candidate_fields, image_views, self.config, self.ivm, self.n_images, self.n_meta
        )
        if action.kind == "stop":
            self._record_stop(action.stop_reason, values)
        else:
            self.pending_action = action
            self.pending_values = values

    def _acquisition_count(self) -> int:
        return sum(1 for s in self._steps if s.action.kind != "stop")

    def _record_stop(self, reason: str, values: tuple[CandidateValue, ...]) -> None:
        self._steps.append(
            TranscriptStep(
                step=len(self._steps),
                n_images_before=self.n_images,
                n_meta_before=self.n_meta,
                values=values,
                action=Action.stop(reason),
                revealed=None,
                prediction_after=None,
            )
        )
        self.stop_reason = reason
        self.pending_action = None
        self.pending_values = ()

    def _record_acquisition(self, values, action: Action, revealed: dict) -> int:
        self._steps.append(
            TranscriptStep(
                step=len(self._steps),
                n_images_before=self.n_images,
                n_meta_before=self.n_meta,
                values=values,
                action=action,
                revealed=revealed,
                prediction_after=None,  # patched once the new prediction is known
            )
        )
        return len(self._steps) - 1

    def _patch_prediction(self, step_index: int) -> None:
        old = self._steps[step_index]
        self._steps[step_index] = TranscriptStep(
            step=old.step,
            n_images_before=old.n_images_before,
            n_meta_before=old.n_meta_before,
            values=old.values,
            action=old.action,
            revealed=old.revealed,
            prediction_after=tuple(float(x) for x in self.prediction.probs),
        )

    # -- submissions -------------------------------------------------------

    def submit_metadata(self, field_id: int, answer: AnswerValue) -> None:
        if self.finished:
            raise EngineError("episode already stopped")
        pending = self.pending_action
        if pending is None or pending.kind != "acquire_metadata" or pending.field_id != field_id:
            raise EngineError(f"pending action is {pending}, not a request for field {field_id}")
        self._validate_answer(field_id, answer)
        values, action = self.pending_values, pending
        step_idx = self._record_acquisition(
            values, action, {"field_id": field_id, "answer": answer_to_json(answer)}
        )
        self.answers[field_id] = answer
        self._refresh()
        self._patch_prediction(step_idx)

    def _validate_answer(self, field_id: int, answer: AnswerValue) -> None:
        spec = self.schema.field(field_id)
        if spec.is_categorical:
            if not isinstance(answer, CategoricalAnswer) or not 0 <= answer.index <= spec.kind.cardinality:
                raise EngineError(f"field {field_id} expects a categorical index in 0..{spec.kind.cardinality}")
        elif not isinstance(answer, (ScalarAnswer, ScalarUnknown)):
            raise EngineError(f"field {field_id} expects a scalar answer")

    def submit_image(self, embedding: np.ndarray | None = None) -> None:
        if self.finished:
            raise EngineError("episode already stopped")
        pending = self.pending_action
        if pending is None or pending.kind != "acquire_image":
            raise EngineError(f"pending action is {pending}, not an image request")
        values, action = self.pending_values, pending
        if self.case is not None:
            idx, view, substituted = self._reveal_case_image(pending.view)
            step_idx = self._record_acquisition(
                values, action, {"image_index": idx, "view": view.value, "substituted": substituted}
            )
            self.acquired_images.append((idx, pending.view))
        else:
            if embedding is None:
                raise EngineError("live mode requires an embedding vector for image submissions")
            emb = np.asarray(embedding, dtype=np.float64)
            idx = len(self._live_embeddings)
            self._live_embeddings.append(emb)
            self.acquired_images.append((idx, pending.view))
            step_idx = self._record_acquisition(
                values, action, {"image_index": idx, "view": None, "substituted": False}
            )
        self._refresh(initial=self._initial_prediction is None)
        self._patch_prediction(step_idx)

    def auto_step(self) -> None:
        """Simulation: fulfill the pending action from the bound case."""
        if self.case is None:
            raise EngineError("auto_step requires simulated mode")
        pending = self.pending_action
        if pending is None:
            raise EngineError("no pending action")
        if pending.kind == "acquire_metadata":
            self.submit_metadata(pending.field_id, self.case.metadata[pending.field_id])
        else:
            self.submit_image()

    def _reveal_case_image(self, requested: ViewType | None) -> tuple[int, ViewType, bool]:
        return reveal_case_image(self.case, {i for i, _ in self.acquired_images}, requested)

    # -- output ------------------------------------------------------------

    def build_transcript(self) -> EpisodeTranscript:
        if self._initial_prediction is None:
            raise EngineError("episode has no prediction yet")
        final = tuple(float(x) for x in self.prediction.probs)
        return EpisodeTranscript(
            case_id=self.case.case_id if self.case is not None else -1,
            label=self.case.label if self.case is not None else None,
            policy=self.policy_name,
            setup_images=tuple(self._setup_images),
            initial_prediction=self._initial_prediction,
            steps=tuple(self._steps),
            final_prediction=final,
            stop_reason=self.stop_reason if self.stop_reason is not None else "in_progress",
            n_images_acquired=self.n_images,
            n_meta_acquired=self.n_meta,
            n_images_available=len(self.case.images) if self.case is not None else self.n_images,
            n_meta_available=len(self.schema),
        )


def next_action(
    case: Case,
    state: AcquisitionState,
    config: EngineConfig,
    model: ClassifierInterface,
    schema: MetadataSchema,
    ivm: ImageValueModel | None = None,
) -> tuple[Action, tuple[CandidateValue, ...]]:
    """One-shot decision for an explicit state (batch/analysis entry point)."""
    if state.n_images < 1:
        raise EngineError("next_action requires at least one acquired image")
    candidate_fields = [f.id for f in schema.fields if f.id not in state.acquired_fields]
    used = {i for i, _ in state.acquired_images}
    has_unused = len(used) < len(case.images)
    image_views: list[ViewType | None]
    if not has_unused:
        image_views = []
    elif config.instruction_mode:
        image_views = list(VIEW_ORDER)
    else:
        image_views = [None]
    if not candidate_fields and not image_views:
        return Action.stop(STOP_EXHAUSTED), ()
    embeddings = [case.images[i].embedding for i in state.image_indices()]
    state_eval = evaluate_state(
        model, schema, state.acquired_fields, embeddings, candidate_fields, config.metric, config.kl_reverse
    )
    return decide(state_eval, candidate_fields, image_views, config, ivm, state.n_images, state.n_meta)


def run_episode(
    case: Case,
    model: ClassifierInterface,
    schema: MetadataSchema,
    config: EngineConfig,
    ivm: ImageValueModel | None = None,
    *,
    policy_name: str = "mint",
    first_image_policy: str = FIRST_LISTED,
    episode_seed: int = 0,
    images_upfront: bool = False,
    meta_budget: int | None = None,
    image_budget: int | None = None,
    evaluator: CaseEvaluator | None = None,
) -> EpisodeTranscript:
    """Run one full simulated acquisition episode and return its transcript."""
    driver = EpisodeDriver(
        model,
        schema,
        config,
        ivm,
        case=case,
        policy_name=policy_name,
        first_image_policy=first_image_policy,
        episode_seed=episode_seed,
        images_upfront=images_upfront,
        meta_budget=meta_budget,
        image_budget=image_budget,
        evaluator=evaluator,
    )
    while not driver.finished:
        driver.auto_step()
    return driver.build_transcript()
