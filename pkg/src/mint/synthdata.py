"""Deterministic generator for a dermatology-shaped synthetic dataset.

Informativeness is controllable per field so acquisition behavior is
verifiable by construction: an informative field's answers come from a
peaked class-conditional table, a noise field's answers are uniform. Image
embeddings are class/view Gaussian clusters, so extra images reduce noise
and different views carry complementary information. A synthetic rater
panel votes on each case from an oracle posterior; case difficulty is one
minus the true-class vote share.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import (
    Case,
    CaseImage,
    Categorical,
    CategoricalAnswer,
    FieldSpec,
    MetadataSchema,
    Scalar,
    ScalarAnswer,
    ScalarUnknown,
    Severity,
    ViewType,
    VIEW_ORDER,
)


@dataclass(frozen=True)
class SynthFieldConfig:
    name: str
    kind: str  # "categorical" | "scalar"
    screen_id: int
    informativeness: float  # probability the answer is class-conditional vs uniform/global
    unknown_rate: float
    cardinality: int = 0  # categorical only (excludes Unknown)
    scalar_base: float = 45.0
    scalar_class_spread: float = 12.0
    scalar_noise: float = 6.0

    def __post_init__(self) -> None:
        if self.kind not in ("categorical", "scalar"):
            raise ValueError(f"unknown field kind {self.kind!r}")
        if not 0.0 <= self.informativeness <= 1.0:
            raise ValueError("informativeness must be in [0,1]")
        if not 0.0 <= self.unknown_rate <= 1.0:
            raise ValueError("unknown_rate must be in [0,1]")
        if self.kind == "categorical" and self.cardinality < 1:
            raise ValueError("categorical fields need cardinality >= 1")


def default_fields() -> tuple[SynthFieldConfig, ...]:
    """12 fields on 6 screens: 8 informative (one scalar), 4 pure noise."""
    cat = lambda name, card, inf, screen: SynthFieldConfig(
        name=name, kind="categorical", screen_id=screen, informativeness=inf, unknown_rate=0.1, cardinality=card
    )
    return (
        SynthFieldConfig(
            name="Age", kind="scalar", screen_id=0, informativeness=0.8, unknown_rate=0.1
        ),
        cat("Is it itchy?", 2, 0.8, 0),
        cat("Is it painful?", 2, 0.8, 1),
        cat("Is it growing?", 2, 0.8, 1),
        cat("Is it bleeding?", 3, 0.8, 2),
        cat("Texture of the area", 4, 0.8, 2),
        cat("Color pattern", 6, 0.8, 3),
        cat("Body location", 12, 0.8, 3),
        cat("Do you drink coffee?", 2, 0.0, 4),
        cat("Preferred season", 4, 0.0, 4),
        cat("Is it Tuesday today?", 2, 0.0, 5),
        cat("Favorite number group", 9, 0.0, 5),
    )


@dataclass(frozen=True)
class GeneratorConfig:
    num_classes: int = 12
    embedding_dim: int = 16
    train_cases: int = 2000
    val_cases: int = 500
    test_cases: int = 500
    min_images: int = 2
    max_images: int = 6
    view_probs: tuple[float, float, float] = (0.4, 0.4, 0.2)  # near, far, other
    # Classes fall into visually similar clusters: images mostly resolve the
    # cluster, metadata distinguishes classes within it.
    n_clusters: int = 3
    cluster_sep: float = 1.1
    class_sep: float = 0.10
    view_spread: float = 0.12
    noise_sigma: float = 1.2
    fields: tuple[SynthFieldConfig, ...] = field(default_factory=default_fields)
    severity_proportions: tuple[float, float, float] = (0.56, 0.36, 0.08)  # low, medium, high
    rater_panel_size: int = 10
    rater_temperature: float = 6.0
    seed: int = 0

    def __post_init__(self) -> None:
        if abs(sum(self.severity_proportions) - 1.0) > 1e-9:
            raise ValueError("severity proportions must sum to 1")
        if abs(sum(self.view_probs) - 1.0) > 1e-9:
            raise ValueError("view probabilities must sum to 1")
        if self.min_images < 1 or self.max_images < self.min_images:
            raise ValueError("image count range invalid")


@dataclass(frozen=True)
class GeneratorStructure:
    """The frozen generative parameters implied by a config (seed-derived)."""

    class_view_means: np.ndarray  # (C, 3, D)
    cat_tables: dict[int, np.ndarray]  # field id -> (C, cardinality)
    scalar_class_means: dict[int, np.ndarray]  # field id -> (C,)
    class_severity: tuple[Severity, ...]  # per class
    class_prior: np.ndarray  # (C,)


def _severity_assignment(config: GeneratorConfig) -> tuple[tuple[Severity, ...], np.ndarray]:
    """Assign classes to severity buckets and derive the class prior.

    Bucket sizes are proportional to the severity proportions (at least one
    class each); the prior gives each bucket its target total probability,
    uniform within the bucket.
    """
    c = config.num_classes
    props = np.asarray(config.severity_proportions, dtype=np.float64)
    sizes = np.maximum(1, np.floor(props * c).astype(int))
    while sizes.sum() > c:
        sizes[int(np.argmax(sizes))] -= 1
    while sizes.sum() < c:
        sizes[int(np.argmax(props - sizes / c))] += 1
    severities: list[Severity] = []
    for sev, size in zip((Severity.LOW, Severity.MEDIUM, Severity.HIGH), sizes):
        severities.extend([sev] * int(size))
    prior = np.concatenate([np.full(int(size), p / size) for p, size in zip(props, sizes)])
    prior = prior / prior.sum()
    return tuple(severities), prior


def build_structure(config: GeneratorConfig) -> GeneratorStructure:
    rng = np.random.default_rng([config.seed, 0])
    c, d = config.num_classes, config.embedding_dim
    cluster_base = rng.normal(0.0, 1.0, size=(config.n_clusters, d))
    class_base = rng.normal(0.0, 1.0, size=(c, d))
    view_jitter = rng.normal(0.0, 1.0, size=(c, len(VIEW_ORDER), d))
    cluster_of = np.arange(c) % config.n_clusters
    means = (
        config.cluster_sep * cluster_base[cluster_of][:, None, :]
        + config.class_sep * class_base[:, None, :]
        + config.view_spread * view_jitter
    )

    cat_tables: dict[int, np.ndarray] = {}
    scalar_means: dict[int, np.ndarray] = {}
    for fid, fc in enumerate(config.fields):
        if fc.kind == "categorical":
            cat_tables[fid] = rng.dirichlet(np.full(fc.cardinality, 0.3), size=c)
        else:
            scalar_means[fid] = fc.scalar_base + fc.scalar_class_spread * rng.normal(0.0, 1.0, size=c)

    class_severity, class_prior = _severity_assignment(config)
    return GeneratorStructure(
        class_view_means=means,
        cat_tables=cat_tables,
        scalar_class_means=scalar_means,
        class_severity=class_severity,
        class_prior=class_prior,
    )


def _scalar_global_sd(fc: SynthFieldConfig) -> float:
    return float(np.hypot(fc.scalar_class_spread, fc.scalar_noise))


def _log_posterior(
    config: GeneratorConfig,
    structure: GeneratorStructure,
    images: Sequence[CaseImage],
    raw_answers: dict[int, object],
) -> np.ndarray:
    """Oracle Bayes log-posterior over classes given a case's sampled data."""
    c = config.num_classes
    logp = np.log(structure.class_prior)
    two_var = 2.0 * config.noise_sigma**2
    for img in images:
        v = VIEW_ORDER.index(img.view)
        diffs = structure.class_view_means[:, v, :] - img.embedding[None, :]
        logp = logp - np.sum(diffs**2, axis=1) / two_var
    for fid, fc in enumerate(config.fields):
        ans = raw_answers[fid]
        if ans is None:
            continue  # unknown rate is class-independent
        if fc.kind == "categorical":
            table = structure.cat_tables[fid][:, int(ans)]
            mix = fc.informativeness * table + (1.0 - fc.informativeness) / fc.cardinality
            logp = logp + np.log(np.maximum(mix, 1e-300))
        else:
            value = float(ans)
            informative = np.exp(-((value - structure.scalar_class_means[fid]) ** 2) / (2 * fc.scalar_noise**2)) / (
                fc.scalar_noise * np.sqrt(2 * np.pi)
            )
            sd = _scalar_global_sd(fc)
            background = np.exp(-((value - fc.scalar_base) ** 2) / (2 * sd**2)) / (sd * np.sqrt(2 * np.pi))
            mix = fc.informativeness * informative + (1.0 - fc.informativeness) * background
            logp = logp + np.log(np.maximum(mix, 1e-300))
    return logp - logp.max()


def _sample_case(case_id: int, config: GeneratorConfig, structure: GeneratorStructure) -> Case:
    rng = np.random.default_rng([config.seed, 1, case_id])
    label = int(rng.choice(config.num_classes, p=structure.class_prior))

    n_images = int(rng.integers(config.min_images, config.max_images + 1))
    images = []
    for _ in range(n_images):
        view = VIEW_ORDER[int(rng.choice(len(VIEW_ORDER), p=np.asarray(config.view_probs)))]
        mean = structure.class_view_means[label, VIEW_ORDER.index(view), :]
        emb = mean + config.noise_sigma * rng.normal(0.0, 1.0, size=config.embedding_dim)
        images.append(CaseImage(view=view, embedding=emb))

    raw_answers: dict[int, object] = {}
    metadata = {}
    for fid, fc in enumerate(config.fields):
        unknown = rng.random() < fc.unknown_rate
        if fc.kind == "categorical":
            if rng.random() < fc.informativeness:
                idx = int(rng.choice(fc.cardinality, p=structure.cat_tables[fid][label]))
            else:
                idx = int(rng.integers(0, fc.cardinality))
            raw_answers[fid] = None if unknown else idx
            metadata[fid] = CategoricalAnswer(index=fc.cardinality if unknown else idx)
        else:
            if rng.random() < fc.informativeness:
                value = float(structure.scalar_class_means[fid][label] + fc.scalar_noise * rng.normal())
            else:
                value = float(fc.scalar_base + _scalar_global_sd(fc) * rng.normal())
            raw_answers[fid] = None if unknown else value
            metadata[fid] = ScalarUnknown() if unknown else ScalarAnswer(value=value)

    logpost = _log_posterior(config, structure, images, raw_answers)
    vote_logits = logpost / config.rater_temperature
    vote_probs = np.exp(vote_logits - vote_logits.max())
    vote_probs = vote_probs / vote_probs.sum()
    votes = rng.choice(config.num_classes, size=config.rater_panel_size, p=vote_probs)
    difficulty = 1.0 - float(np.sum(votes == label)) / config.rater_panel_size

    return Case(
        case_id=case_id,
        images=tuple(images),
        metadata=metadata,
        label=label,
        difficulty=difficulty,
        severity=structure.class_severity[label],
    )


def _build_schema(config: GeneratorConfig, train_cases: Sequence[Case]) -> MetadataSchema:
    """Schema with scalar percentiles frozen from the train split's known answers."""
    fields: list[FieldSpec] = []
    for fid, fc in enumerate(config.fields):
        if fc.kind == "categorical":
            kind: Categorical | Scalar = Categorical(cardinality=fc.cardinality)
        else:
            values = [
                case.metadata[fid].value
                for case in train_cases
                if isinstance(case.metadata[fid], ScalarAnswer)
            ]
            if not values:
                values = [fc.scalar_base]
            p10, p50, p90 = (float(np.percentile(values, q)) for q in (10, 50, 90))
            kind = Scalar(placeholder=p50, p10=p10, p50=p50, p90=p90)
        fields.append(FieldSpec(id=fid, name=fc.name, kind=kind, screen_id=fc.screen_id))
    return MetadataSchema(fields=tuple(fields))


def generate(config: GeneratorConfig) -> tuple[list[Case], list[Case], list[Case], MetadataSchema]:
    """Generate disjoint train/val/test splits and the schema.

    Case ids are globally unique across splits; everything is a pure
    function of the config (same seed, byte-identical output).
    """
    structure = build_structure(config)
    n_total = config.train_cases + config.val_cases + config.test_cases
    cases = [_sample_case(cid, config, structure) for cid in range(n_total)]
    train = cases[: config.train_cases]
    val = cases[config.train_cases : config.train_cases + config.val_cases]
    test = cases[config.train_cases + config.val_cases :]
    schema = _build_schema(config, train)
    return train, val, test, schema
