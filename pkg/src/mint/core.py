"""Domain types, dataset schema, and the pluggable classifier interface.

Everything downstream (engine, baselines, calibration, service) consumes the
types defined here. All objects are immutable value objects after
construction; the only mutable state in the system is the per-episode
``AcquisitionState``, which is owned by a single engine run.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Protocol, Sequence, Union, runtime_checkable

import numpy as np


class SchemaError(ValueError):
    """A field id or field definition does not match the schema."""


class EncodingError(ValueError):
    """An answer cannot be encoded under its field's definition."""


class ViewType(str, Enum):
    """Perspective of a photograph. Closed set, serialized lowercase."""

    NEAR = "near"
    FAR = "far"
    OTHER = "other"


VIEW_ORDER: tuple[ViewType, ...] = (ViewType.NEAR, ViewType.FAR, ViewType.OTHER)


class Severity(str, Enum):
    LOW = "low"
    MEDIUM = "medium"
    HIGH = "high"


@dataclass(frozen=True)
class Categorical:
    """Categorical field kind; ``cardinality`` excludes the Unknown slot."""

    cardinality: int

    def __post_init__(self) -> None:
        if self.cardinality < 1:
            raise SchemaError(f"categorical cardinality must be >= 1, got {self.cardinality}")


@dataclass(frozen=True)
class Scalar:
    """Scalar field kind with train-set percentiles and the p50 placeholder."""

    placeholder: float
    p10: float
    p50: float
    p90: float

    def __post_init__(self) -> None:
        if not (self.p10 <= self.p50 <= self.p90):
            raise SchemaError(f"scalar percentiles must be ordered: {self.p10}, {self.p50}, {self.p90}")
        if self.placeholder != self.p50:
            raise SchemaError("scalar placeholder must equal the train-set median (p50)")


FieldKind = Union[Categorical, Scalar]


@dataclass(frozen=True)
class FieldSpec:
    id: int
    name: str
    kind: FieldKind
    screen_id: int

    @property
    def encoded_width(self) -> int:
        """Width of this field's block in the encoded metadata vector."""
        if isinstance(self.kind, Categorical):
            return self.kind.cardinality + 1  # last slot reserved for Unknown
        return 1

    @property
    def is_categorical(self) -> bool:
        return isinstance(self.kind, Categorical)


@dataclass(frozen=True)
class MetadataSchema:
    """Ordered field list. Field ids must be 0..K-1, dense and unique."""

    fields: tuple[FieldSpec, ...]

    def __post_init__(self) -> None:
        ids = [f.id for f in self.fields]
        if ids != list(range(len(self.fields))):
            raise SchemaError(f"field ids must be dense 0..K-1 in order, got {ids}")

    def __len__(self) -> int:
        return len(self.fields)

    def field(self, field_id: int) -> FieldSpec:
        if not 0 <= field_id < len(self.fields):
            raise SchemaError(f"unknown field id {field_id}")
        return self.fields[field_id]

    @property
    def encoded_width(self) -> int:
        return sum(f.encoded_width for f in self.fields)

    def block_offset(self, field_id: int) -> int:
        """Start index of a field's block in the encoded vector."""
        self.field(field_id)
        return sum(f.encoded_width for f in self.fields[:field_id])

    def screen_of(self, field_id: int) -> int:
        return self.field(field_id).screen_id

    @property
    def screen_ids(self) -> tuple[int, ...]:
        return tuple(sorted({f.screen_id for f in self.fields}))

    def to_json_dict(self) -> dict:
        out = []
        for f in self.fields:
            if isinstance(f.kind, Categorical):
                kind = {"type": "categorical", "cardinality": f.kind.cardinality}
            else:
                kind = {
                    "type": "scalar",
                    "placeholder": f.kind.placeholder,
                    "p10": f.kind.p10,
                    "p50": f.kind.p50,
                    "p90": f.kind.p90,
                }
            out.append({"id": f.id, "name": f.name, "kind": kind, "screen_id": f.screen_id})
        return {"fields": out}

    @classmethod
    def from_json_dict(cls, doc: dict) -> "MetadataSchema":
        fields = []
        for entry in doc["fields"]:
            k = entry["kind"]
            if k["type"] == "categorical":
                kind: FieldKind = Categorical(cardinality=int(k["cardinality"]))
            elif k["type"] == "scalar":
                kind = Scalar(
                    placeholder=float(k["placeholder"]),
                    p10=float(k["p10"]),
                    p50=float(k["p50"]),
                    p90=float(k["p90"]),
                )
            else:
                raise SchemaError(f"unknown field kind {k['type']!r}")
            fields.append(
                FieldSpec(id=int(entry["id"]), name=str(entry["name"]), kind=kind, screen_id=int(entry["screen_id"]))
            )
        return cls(fields=tuple(fields))

    def fingerprint(self) -> str:
        canon = json.dumps(self.to_json_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()


# --------------------------------------------------------------------------
# Answers
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class CategoricalAnswer:
    """Answer index in 0..c where index c selects the Unknown slot."""

    index: int


@dataclass(frozen=True)
class ScalarAnswer:
    value: float


@dataclass(frozen=True)
class ScalarUnknown:
    pass


AnswerValue = Union[CategoricalAnswer, ScalarAnswer, ScalarUnknown]


def answer_to_json(answer: AnswerValue):
    if isinstance(answer, CategoricalAnswer):
        return int(answer.index)
    if isinstance(answer, ScalarAnswer):
        return float(answer.value)
    if isinstance(answer, ScalarUnknown):
        return "unknown"
    raise TypeError(f"not an AnswerValue: {answer!r}")


def answer_from_json(value, spec: FieldSpec) -> AnswerValue:
    if value == "unknown":
        if spec.is_categorical:
            return CategoricalAnswer(index=spec.kind.cardinality)
        return ScalarUnknown()
    if spec.is_categorical:
        return CategoricalAnswer(index=int(value))
    return ScalarAnswer(value=float(value))


def unknown_answer(spec: FieldSpec) -> AnswerValue:
    if spec.is_categorical:
        return CategoricalAnswer(index=spec.kind.cardinality)
    return ScalarUnknown()


def is_unknown(answer: AnswerValue, spec: FieldSpec) -> bool:
    if isinstance(answer, ScalarUnknown):
        return True
    if isinstance(answer, CategoricalAnswer) and spec.is_categorical:
        return answer.index == spec.kind.cardinality
    return False


# --------------------------------------------------------------------------
# Cases and predictions
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class CaseImage:
    view: ViewType
    embedding: np.ndarray  # shape (D,), float64

    def __post_init__(self) -> None:
        emb = np.asarray(self.embedding, dtype=np.float64)
        object.__setattr__(self, "embedding", emb)
        if emb.ndim != 1:
            raise ValueError(f"image embedding must be 1-D, got shape {emb.shape}")


@dataclass(frozen=True)
class Case:
    """One patient episode: images as embeddings, full metadata answers, label."""

    case_id: int
    images: tuple[CaseImage, ...]
    metadata: Mapping[int, AnswerValue]
    label: int
    difficulty: float
    severity: Severity

    def __post_init__(self) -> None:
        if len(self.images) < 1:
            raise ValueError(f"case {self.case_id} has no images")
        dims = {img.embedding.shape[0] for img in self.images}
        if len(dims) != 1:
            raise ValueError(f"case {self.case_id} has mixed embedding dims {sorted(dims)}")
        if not 0.0 <= self.difficulty <= 1.0:
            raise ValueError(f"case {self.case_id} difficulty {self.difficulty} outside [0,1]")

    @property
    def embedding_dim(self) -> int:
        return self.images[0].embedding.shape[0]

    def views(self) -> tuple[ViewType, ...]:
        return tuple(img.view for img in self.images)


def validate_case(case: Case, schema: MetadataSchema, num_classes: int) -> None:
    """Check schema coverage and label range; raises on violation."""
    if set(case.metadata.keys()) != set(range(len(schema))):
        raise SchemaError(
            f"case {case.case_id} metadata keys {sorted(case.metadata)} do not cover schema fields 0..{len(schema) - 1}"
        )
    if not 0 <= case.label < num_classes:
        raise ValueError(f"case {case.case_id} label {case.label} outside 0..{num_classes - 1}")
    for fid, ans in case.metadata.items():
        spec = schema.field(fid)
        if spec.is_categorical:
            if not isinstance(ans, CategoricalAnswer):
                raise EncodingError(f"field {fid} expects a categorical answer")
            if not 0 <= ans.index <= spec.kind.cardinality:
                raise EncodingError(f"field {fid} categorical index {ans.index} out of range")
        else:
            if not isinstance(ans, (ScalarAnswer, ScalarUnknown)):
                raise EncodingError(f"field {fid} expects a scalar answer")


@dataclass(frozen=True)
class PredictiveDistribution:
    """Probability vector over classes; non-negative, sums to 1 within 1e-9."""

    probs: np.ndarray

    def __post_init__(self) -> None:
        p = np.asarray(self.probs, dtype=np.float64)
        object.__setattr__(self, "probs", p)
        if p.ndim != 1:
            raise ValueError(f"probs must be 1-D, got shape {p.shape}")
        if np.any(p < 0):
            raise ValueError("probs must be non-negative")
        total = float(p.sum())
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"probs must sum to 1 within 1e-9, got {total}")

    def __len__(self) -> int:
        return len(self.probs)

    def top_indices(self, k: int) -> np.ndarray:
        """Class indices of the k largest probabilities; ties go to lower index."""
        order = np.lexsort((np.arange(len(self.probs)), -self.probs))
        return order[:k]


@dataclass
class AcquisitionState:
    """Inputs acquired so far plus the cached current prediction.

    ``acquired_images`` stores (image index, view it was requested as); the
    requested view is None for policy-acquired or "any" requests. The cached
    prediction must always equal the classifier's output on exactly the
    acquired inputs (pooling over image indices in ascending order).
    """

    case_ref: int
    acquired_images: list[tuple[int, ViewType | None]] = field(default_factory=list)
    acquired_fields: dict[int, AnswerValue] = field(default_factory=dict)
    current_prediction: PredictiveDistribution | None = None

    @property
    def n_images(self) -> int:
        return len(self.acquired_images)

    @property
    def n_meta(self) -> int:
        return len(self.acquired_fields)

    def image_indices(self) -> tuple[int, ...]:
        return tuple(sorted(idx for idx, _ in self.acquired_images))


@runtime_checkable
class ClassifierInterface(Protocol):
    """Opaque multi-modal classifier: deterministic, total over input subsets."""

    def predict(
        self,
        images: Sequence[np.ndarray],
        answers: Mapping[int, AnswerValue],
        schema: MetadataSchema,
    ) -> PredictiveDistribution: ...


# --------------------------------------------------------------------------
# Operations
# --------------------------------------------------------------------------


def encode_metadata(answers: Mapping[int, AnswerValue], schema: MetadataSchema) -> np.ndarray:
    """Encode a partial answer map into the fixed-width metadata vector.

    Layout follows schema field order. Each categorical field occupies
    cardinality+1 slots (Unknown last); unanswered categoricals one-hot the
    Unknown slot. Scalar fields occupy one slot; unanswered scalars encode
    the schema placeholder (the train-set median).
    """
    for fid in answers:
        schema.field(fid)  # raises SchemaError on unknown ids
    out = np.zeros(schema.encoded_width, dtype=np.float64)
    offset = 0
    for spec in schema.fields:
        ans = answers.get(spec.id)
        if isinstance(spec.kind, Categorical):
            c = spec.kind.cardinality
            if ans is None:
                idx = c
            elif isinstance(ans, CategoricalAnswer):
                idx = ans.index
                if not 0 <= idx <= c:
                    raise EncodingError(f"field {spec.id} categorical index {idx} exceeds Unknown slot {c}")
            else:
                raise EncodingError(f"field {spec.id} expects a categorical answer, got {type(ans).__name__}")
            out[offset + idx] = 1.0
            offset += c + 1
        else:
            if ans is None or isinstance(ans, ScalarUnknown):
                out[offset] = spec.kind.placeholder
            elif isinstance(ans, ScalarAnswer):
                out[offset] = ans.value
            else:
                raise EncodingError(f"field {spec.id} expects a scalar answer, got {type(ans).__name__}")
            offset += 1
    return out


def pool_image_embeddings(embeddings: Sequence[np.ndarray], dim: int | None = None) -> np.ndarray:
    """Element-wise mean of image embeddings; empty input pools to zeros.

    ``dim`` is required for the empty case. The engine guarantees at least
    one image before any prediction it acts on; the zero vector just keeps
    predict total.
    """
    if len(embeddings) == 0:
        if dim is None:
            raise ValueError("dim is required to pool an empty embedding list")
        return np.zeros(dim, dtype=np.float64)
    arrs = [np.asarray(e, dtype=np.float64) for e in embeddings]
    d = arrs[0].shape[0]
    for a in arrs:
        if a.shape != (d,):
            raise ValueError(f"embedding dimension mismatch: {a.shape} vs ({d},)")
    if dim is not None and dim != d:
        raise ValueError(f"embedding dimension mismatch: got {d}, expected {dim}")
    return np.mean(np.stack(arrs, axis=0), axis=0)


# --------------------------------------------------------------------------
# Dataset files: JSONL cases + JSON schema
# --------------------------------------------------------------------------


def case_to_json_dict(case: Case) -> dict:
    return {
        "case_id": case.case_id,
        "label": case.label,
        "severity": case.severity.value,
        "difficulty": case.difficulty,
        "images": [{"view": img.view.value, "embedding": [float(x) for x in img.embedding]} for img in case.images],
        "metadata": [
            {"field_id": fid, "value": answer_to_json(case.metadata[fid])} for fid in sorted(case.metadata)
        ],
    }


def case_from_json_dict(doc: dict, schema: MetadataSchema) -> Case:
    images = tuple(
        CaseImage(view=ViewType(img["view"]), embedding=np.asarray(img["embedding"], dtype=np.float64))
        for img in doc["images"]
    )
    metadata = {
        int(entry["field_id"]): answer_from_json(entry["value"], schema.field(int(entry["field_id"])))
        for entry in doc["metadata"]
    }
    return Case(
        case_id=int(doc["case_id"]),
        images=images,
        metadata=metadata,
        label=int(doc["label"]),
        difficulty=float(doc["difficulty"]),
        severity=Severity(doc["severity"]),
    )


def save_cases_jsonl(cases: Iterable[Case], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for case in cases:
            fh.write(json.dumps(case_to_json_dict(case), separators=(",", ":")) + "\n")


def load_cases_jsonl(path: str | Path, schema: MetadataSchema) -> list[Case]:
    cases = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                cases.append(case_from_json_dict(json.loads(line), schema))
    return cases


def save_schema(schema: MetadataSchema, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(schema.to_json_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_schema(path: str | Path) -> MetadataSchema:
    with open(path, "r", encoding="utf-8") as fh:
        return MetadataSchema.from_json_dict(json.load(fh))


# --------------------------------------------------------------------------
# Dermatology-shaped schema preset
# --------------------------------------------------------------------------

_YES_NO_QUESTIONS = (
    "Is the appearance concerning?",
    "Is it bleeding?",
    "Is it burning?",
    "Are you experiencing chills?",
    "Are you experiencing fatigue?",
    "Are you experiencing fever?",
    "Are you experiencing joint pain?",
    "Are you experiencing muscle pain?",
    "Are you experiencing mouth sores?",
    "Are you experiencing shortness of breath?",
    "No symptoms other than what can be seen?",
    "Is it itchy?",
    "Is it getting darker?",
    "Is it getting larger?",
    "Is it painful?",
    "Do you have a history of eczema?",
    "Do you have a history of psoriasis?",
    "Do you have a history of melanoma?",
    "Do you have a history of skin cancer?",
)


def dermatology_preset_schema(age_p10: float = 25.0, age_p50: float = 40.0, age_p90: float = 65.0) -> MetadataSchema:
    """Standard intake questionnaire: 1 scalar + 24 categorical fields.

    Encoded width is 101 (one scalar slot plus categorical blocks totalling
    100). Fields are grouped into 6 submission screens.
    """
    fields: list[FieldSpec] = [
        FieldSpec(0, "Age", Scalar(placeholder=age_p50, p10=age_p10, p50=age_p50, p90=age_p90), screen_id=0),
        FieldSpec(1, "Gender", Categorical(5), screen_id=0),
        FieldSpec(2, "Fitzpatrick skin type", Categorical(6), screen_id=0),
    ]
    next_id = 3
    # Symptom and history questions spread over screens 1..4.
    for i, question in enumerate(_YES_NO_QUESTIONS):
        fields.append(FieldSpec(next_id, question, Categorical(2), screen_id=1 + i % 4))
        next_id += 1
    fields.append(FieldSpec(next_id, "Which body part is the skin problem on?", Categorical(12), screen_id=5))
    fields.append(FieldSpec(next_id + 1, "What best describes your skin issue?", Categorical(6), screen_id=5))
    fields.append(FieldSpec(next_id + 2, "Duration of problem", Categorical(9), screen_id=5))
    return MetadataSchema(fields=tuple(fields))
