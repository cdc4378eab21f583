"""Comparison policies: random ordering, fitted static ordering, max-softmax
early stopping, fixed acquisition budgets, and the engine itself behind one
dispatch surface. All policies emit the shared transcript format."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

from .classifier import TrainedModel
from .core import (
    Case,
    ClassifierInterface,
    MetadataSchema,
    encode_metadata,
    pool_image_embeddings,
)
from .divergence import MetricKind, parse_metric
from .engine import (
    Action,
    EngineConfig,
    EpisodeTranscript,
    ImageValueModel,
    STOP_EXHAUSTED,
    TranscriptStep,
    run_episode,
)
from .evalharness import topk_accuracy

STOP_CONFIDENCE = "confidence_reached"


@dataclass(frozen=True)
class RandomPolicy:
    """Metadata acquired in a per-case random order, all images given."""

    seed: int = 0


@dataclass(frozen=True)
class GlobalStaticPolicy:
    """One fixed metadata order applied to every case, all images given."""

    order: tuple[int, ...] | None = None  # None until fitted on validation


@dataclass(frozen=True)
class MSPEarlyStopPolicy:
    """Images only, seeded random order; stop when max softmax prob >= tau."""

    tau: float
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError(f"tau must be in [0,1], got {self.tau}")


@dataclass(frozen=True)
class FixedBudgetPolicy:
    """Greedy value ordering truncated at fixed per-class budgets.

    None budgets mean "all available". (0, None) reproduces the all-images
    row; (None, None) reproduces all-inputs acquisition.
    """

    n_meta: int | None
    n_images: int | None
    images_upfront: bool = False


@dataclass(frozen=True)
class MintPolicy:
    config: EngineConfig = field(default_factory=EngineConfig)
    images_upfront: bool = False
    first_image_policy: str = "first_listed"
    episode_seed: int = 0


Policy = Union[RandomPolicy, GlobalStaticPolicy, MSPEarlyStopPolicy, FixedBudgetPolicy, MintPolicy]


class PolicyError(ValueError):
    pass


# --------------------------------------------------------------------------
# Static-order episodes (random / global)
# --------------------------------------------------------------------------


def _predict_state(model, schema, case, image_indices, answers):
    embeddings = [case.images[i].embedding for i in sorted(image_indices)]
    return model.predict(embeddings, answers, schema)


def static_order_episode(
    case: Case,
    model: ClassifierInterface,
    schema: MetadataSchema,
    order: Sequence[int],
    policy_name: str,
    meta_budget: int | None = None,
) -> EpisodeTranscript:
    """All images upfront, then metadata in the given order (no stopping)."""
    if sorted(order) != list(range(len(schema))):
        raise PolicyError(f"order must be a permutation of field ids 0..{len(schema) - 1}")
    image_indices = list(range(len(case.images)))
    answers: dict = {}
    initial = _predict_state(model, schema, case, image_indices, answers)
    steps: list[TranscriptStep] = []
    take = len(order) if meta_budget is None else min(meta_budget, len(order))
    for i, fid in enumerate(order[:take]):
        answers[fid] = case.metadata[fid]
        pred = _predict_state(model, schema, case, image_indices, answers)
        steps.append(
            TranscriptStep(
                step=i,
                n_images_before=len(image_indices),
                n_meta_before=i,
                values=(),
                action=Action.acquire_metadata(fid),
                revealed={"field_id": fid, "answer": None},
                prediction_after=tuple(float(x) for x in pred.probs),
            )
        )
    steps.append(
        TranscriptStep(
            step=len(steps),
            n_images_before=len(image_indices),
            n_meta_before=take,
            values=(),
            action=Action.stop(STOP_EXHAUSTED),
            revealed=None,
            prediction_after=None,
        )
    )
    final = steps[-2].prediction_after if take > 0 else tuple(float(x) for x in initial.probs)
    return EpisodeTranscript(
        case_id=case.case_id,
        label=case.label,
        policy=policy_name,
        setup_images=tuple((i, case.images[i].view.value) for i in image_indices),
        initial_prediction=tuple(float(x) for x in initial.probs),
        steps=tuple(steps),
        final_prediction=final,
        stop_reason=STOP_EXHAUSTED,
        n_images_acquired=len(image_indices),
        n_meta_acquired=take,
        n_images_available=len(case.images),
        n_meta_available=len(schema),
    )


def msp_early_stop_episode(
    case: Case,
    model: ClassifierInterface,
    schema: MetadataSchema,
    tau: float,
    seed: int = 0,
) -> EpisodeTranscript:
    """Acquire images in seeded random order until max softmax prob >= tau."""
    if not 0.0 <= tau <= 1.0:
        raise PolicyError(f"tau must be in [0,1], got {tau}")
    rng = np.random.default_rng([seed, case.case_id])
    order = [int(i) for i in rng.permutation(len(case.images))]
    acquired = [order[0]]
    pred = _predict_state(model, schema, case, acquired, {})
    initial = pred
    steps: list[TranscriptStep] = []
    stop_reason = STOP_CONFIDENCE if float(np.max(pred.probs)) >= tau else None
    for idx in order[1:]:
        if stop_reason is not None:
            break
        acquired.append(idx)
        pred = _predict_state(model, schema, case, acquired, {})
        steps.append(
            TranscriptStep(
                step=len(steps),
                n_images_before=len(acquired) - 1,
                n_meta_before=0,
                values=(),
                action=Action.acquire_image(None),
                revealed={"image_index": idx, "view": case.images[idx].view.value, "substituted": False},
                prediction_after=tuple(float(x) for x in pred.probs),
            )
        )
        if float(np.max(pred.probs)) >= tau:
            stop_reason = STOP_CONFIDENCE
    if stop_reason is None:
        stop_reason = STOP_EXHAUSTED
    steps.append(
        TranscriptStep(
            step=len(steps),
            n_images_before=len(acquired),
            n_meta_before=0,
            values=(),
            action=Action.stop(stop_reason),
            revealed=None,
            prediction_after=None,
        )
    )
    return EpisodeTranscript(
        case_id=case.case_id,
        label=case.label,
        policy=f"msp:tau={tau}",
        setup_images=((order[0], case.images[order[0]].view.value),),
        initial_prediction=tuple(float(x) for x in initial.probs),
        steps=tuple(steps),
        final_prediction=tuple(float(x) for x in pred.probs),
        stop_reason=stop_reason,
        n_images_acquired=len(acquired),
        n_meta_acquired=0,
        n_images_available=len(case.images),
        n_meta_available=len(schema),
    )


# --------------------------------------------------------------------------
# Global static order fitting
# --------------------------------------------------------------------------


def fit_global_order(
    validation_cases: Sequence[Case],
    model: ClassifierInterface,
    schema: MetadataSchema,
    k: int = 3,
) -> tuple[int, ...]:
    """Greedy forward selection of a single metadata order.

    At each position, append the unchosen field that maximizes validation
    Top-k accuracy given all images plus the fixed prefix; ties keep the
    lowest field id.
    """
    if len(validation_cases) == 0:
        raise PolicyError("validation set is empty")
    pooled = np.stack(
        [pool_image_embeddings([img.embedding for img in c.images]) for c in validation_cases]
    )
    labels = [c.label for c in validation_cases]
    fast = isinstance(model, TrainedModel)

    def accuracy_with(answer_sets) -> float:
        metas = np.stack([encode_metadata(a, schema) for a in answer_sets])
        if fast:
            probs = model.predict_encoded_pairs(pooled, metas)
            preds = list(probs)
        else:
            preds = [
                model.predict([img.embedding for img in c.images], a, schema)
                for c, a in zip(validation_cases, answer_sets)
            ]
        return topk_accuracy(preds, labels, k)

    chosen: list[int] = []
    remaining = list(range(len(schema)))
    prefix_answers = [dict() for _ in validation_cases]
    while remaining:
        best_fid, best_acc = None, -1.0
        for fid in remaining:  # ascending scan keeps the lowest id on ties
            trial = []
            for a, c in zip(prefix_answers, validation_cases):
                extended = dict(a)
                extended[fid] = c.metadata[fid]
                trial.append(extended)
            acc = accuracy_with(trial)
            if acc > best_acc:
                best_fid, best_acc = fid, acc
        chosen.append(best_fid)
        remaining.remove(best_fid)
        for a, c in zip(prefix_answers, validation_cases):
            a[best_fid] = c.metadata[best_fid]
    return tuple(chosen)


# --------------------------------------------------------------------------
# Dispatch
# --------------------------------------------------------------------------


def run_policy(
    policy: Policy,
    case: Case,
    model: ClassifierInterface,
    schema: MetadataSchema,
    ivm: ImageValueModel | None = None,
) -> EpisodeTranscript:
    if isinstance(policy, RandomPolicy):
        rng = np.random.default_rng([policy.seed, case.case_id])
        order = [int(i) for i in rng.permutation(len(schema))]
        return static_order_episode(case, model, schema, order, f"random:seed={policy.seed}")
    if isinstance(policy, GlobalStaticPolicy):
        if policy.order is None:
            raise PolicyError("global static policy must be fitted first (order is None)")
        return static_order_episode(case, model, schema, policy.order, "global")
    if isinstance(policy, MSPEarlyStopPolicy):
        return msp_early_stop_episode(case, model, schema, policy.tau, policy.seed)
    if isinstance(policy, FixedBudgetPolicy):
        config = EngineConfig(metric=MetricKind.JS, t_meta=-np.inf, t_image=-np.inf)
        return run_episode(
            case,
            model,
            schema,
            config,
            ivm,
            policy_name=f"fixed:n_meta={policy.n_meta}:n_images={policy.n_images}",
            images_upfront=policy.images_upfront,
            meta_budget=policy.n_meta,
            image_budget=policy.n_images,
        )
    if isinstance(policy, MintPolicy):
        return run_episode(
            case,
            model,
            schema,
            policy.config,
            ivm,
            policy_name=policy_token(policy),
            images_upfront=policy.images_upfront,
            first_image_policy=policy.first_image_policy,
            episode_seed=policy.episode_seed,
        )
    raise PolicyError(f"unknown policy {policy!r}")


def policy_token(policy: Policy) -> str:
    if isinstance(policy, MintPolicy):
        c = policy.config
        parts = [f"mint:{c.metric.value}", f"t_meta={c.t_meta}", f"t_image={c.t_image}"]
        if c.instruction_mode:
            parts.append("instruction")
        if policy.images_upfront:
            parts.append("upfront")
        return ":".join(parts)
    if isinstance(policy, RandomPolicy):
        return f"random:seed={policy.seed}"
    if isinstance(policy, GlobalStaticPolicy):
        return "global"
    if isinstance(policy, MSPEarlyStopPolicy):
        return f"msp:tau={policy.tau}"
    if isinstance(policy, FixedBudgetPolicy):
        return f"fixed:n_meta={policy.n_meta}:n_images={policy.n_images}"
    raise PolicyError(f"unknown policy {policy!r}")


def parse_policy_token(token: str) -> Policy:
    """Parse a policy token, e.g. ``mint:js:t_meta=0.02:t_image=0.01``,
    ``random:seed=7``, ``global``, ``msp:tau=0.8``, ``fixed:n_meta=3:n_images=2``,
    ``exhaustive``."""
    parts = token.strip().split(":")
    head = parts[0].lower()

    def kwargs_of(items) -> dict[str, str]:
        out = {}
        for item in items:
            if "=" in item:
                key, value = item.split("=", 1)
                out[key] = value
            else:
                out[item] = "true"
        return out

    if head == "mint":
        if len(parts) < 2:
            raise PolicyError("mint token needs a metric, e.g. mint:js")
        metric = parse_metric(parts[1])
        kw = kwargs_of(parts[2:])
        config = EngineConfig(
            metric=metric,
            t_meta=float(kw.pop("t_meta", 0.0)),
            t_image=float(kw.pop("t_image", 0.0)),
            instruction_mode=kw.pop("instruction", "false") == "true",
            kl_reverse=kw.pop("kl_reverse", "false") == "true",
        )
        policy = MintPolicy(
            config=config,
            images_upfront=kw.pop("upfront", "false") == "true",
            first_image_policy=kw.pop("first_image", "first_listed"),
            episode_seed=int(kw.pop("seed", 0)),
        )
        if kw:
            raise PolicyError(f"unknown mint options: {sorted(kw)}")
        return policy
    if head == "random":
        kw = kwargs_of(parts[1:])
        return RandomPolicy(seed=int(kw.get("seed", 0)))
    if head == "global":
        return GlobalStaticPolicy(order=None)
    if head == "msp":
        kw = kwargs_of(parts[1:])
        if "tau" not in kw:
            raise PolicyError("msp token needs tau, e.g. msp:tau=0.8")
        return MSPEarlyStopPolicy(tau=float(kw["tau"]), seed=int(kw.get("seed", 0)))
    if head == "fixed":
        kw = kwargs_of(parts[1:])

        def budget(name):
            raw = kw.get(name, "all")
            return None if raw in ("all", "none") else int(raw)

        return FixedBudgetPolicy(
            n_meta=budget("n_meta"), n_images=budget("n_images"), images_upfront=kw.get("upfront", "false") == "true"
        )
    if head == "exhaustive":
        return FixedBudgetPolicy(n_meta=None, n_images=None)
    raise PolicyError(
        f"unknown policy token {token!r}; expected mint:…, random:…, global, msp:…, fixed:…, exhaustive"
    )
