"""Reference trainable multi-modal classifier.

Pooled image embeddings on one branch, encoded metadata on the other, fused
by concatenation or feature-wise linear modulation (per-channel scale and
shift computed from the metadata embedding), then a two-layer MLP head with
softmax. Trained with momentum SGD, an exponentially decaying learning
rate, random per-field metadata masking, and random withholding of
non-first images so the model stays robust over every input subset the
acquisition engine will query.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .core import (
    AnswerValue,
    Case,
    MetadataSchema,
    PredictiveDistribution,
    Scalar,
    encode_metadata,
    pool_image_embeddings,
)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    fusion: str = "film"  # "concat" | "film"
    hidden_size: int = 64
    embedding_dim: int = 16
    num_classes: int = 12
    meta_embed_size: int = 32
    mask_prob: float = 0.3
    image_drop_prob: float = 0.5
    learning_rate: float = 0.01
    momentum: float = 0.9
    decay_factor: float = 0.1
    weight_decay: float = 0.3  # decoupled; shrinks weights that carry no signal
    steps: int = 2000
    batch_size: int = 16
    seed: int = 0

    def __post_init__(self) -> None:
        if self.fusion not in ("concat", "film"):
            raise ValueError(f"fusion must be 'concat' or 'film', got {self.fusion!r}")
        for name in ("mask_prob", "image_drop_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0,1], got {v}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")

    def head_input_size(self) -> int:
        if self.fusion == "concat":
            return self.embedding_dim + self.meta_embed_size
        return self.embedding_dim


def meta_normalization(schema: MetadataSchema) -> tuple[np.ndarray, np.ndarray]:
    """Per-slot affine normalization of the encoded metadata vector.

    Scalar slots are centered on the schema placeholder (p50) and scaled by
    half the p10..p90 spread so their magnitude matches the one-hot slots;
    without this the raw scalar values dominate (and can kill) the metadata
    branch. Categorical slots pass through unchanged.
    """
    center = np.zeros(schema.encoded_width, dtype=np.float64)
    scale = np.ones(schema.encoded_width, dtype=np.float64)
    offset = 0
    for spec in schema.fields:
        if isinstance(spec.kind, Scalar):
            center[offset] = spec.kind.p50
            scale[offset] = max((spec.kind.p90 - spec.kind.p10) / 2.0, 1e-6)
        offset += spec.encoded_width
    return center, scale


def init_weights(config: ModelConfig, meta_width: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    def he(fan_in: int, shape: tuple[int, ...]) -> np.ndarray:
        return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)

    w: dict[str, np.ndarray] = {
        "w_meta": he(meta_width, (meta_width, config.meta_embed_size)),
        "b_meta": np.zeros(config.meta_embed_size),
    }
    if config.fusion == "film":
        # Small init keeps early modulation near identity (gamma ~ 1, beta ~ 0).
        scale = 0.1 / np.sqrt(config.meta_embed_size)
        w["w_gamma"] = rng.normal(0.0, scale, size=(config.meta_embed_size, config.embedding_dim))
        w["b_gamma"] = np.zeros(config.embedding_dim)
        w["w_beta"] = rng.normal(0.0, scale, size=(config.meta_embed_size, config.embedding_dim))
        w["b_beta"] = np.zeros(config.embedding_dim)
    head_in = config.head_input_size()
    w["w1"] = he(head_in, (head_in, config.hidden_size))
    w["b1"] = np.zeros(config.hidden_size)
    w["w2"] = he(config.hidden_size, (config.hidden_size, config.num_classes))
    w["b2"] = np.zeros(config.num_classes)
    return w


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _forward_cached(weights: Mapping[str, np.ndarray], config: ModelConfig, pooled: np.ndarray, meta: np.ndarray):
    """Batched forward pass returning probabilities and the backprop cache."""
    e_pre = meta @ weights["w_meta"] + weights["b_meta"]
    e = np.maximum(e_pre, 0.0)
    if config.fusion == "concat":
        z = np.concatenate([pooled, e], axis=1)
        gamma = beta = None
    else:
        gamma = 1.0 + e @ weights["w_gamma"] + weights["b_gamma"]
        beta = e @ weights["w_beta"] + weights["b_beta"]
        z = gamma * pooled + beta
    h_pre = z @ weights["w1"] + weights["b1"]
    h = np.maximum(h_pre, 0.0)
    logits = h @ weights["w2"] + weights["b2"]
    probs = _softmax_rows(logits)
    cache = {"meta": meta, "pooled": pooled, "e_pre": e_pre, "e": e, "z": z, "h_pre": h_pre, "h": h, "gamma": gamma}
    return probs, cache


@dataclass
class TrainedModel:
    """Immutable after training; safe for concurrent read-only inference."""

    config: ModelConfig
    schema_fingerprint: str
    weights: dict[str, np.ndarray]
    meta_center: np.ndarray
    meta_scale: np.ndarray

    # -- inference ---------------------------------------------------------

    def normalize_meta(self, meta: np.ndarray) -> np.ndarray:
        return (meta - self.meta_center) / self.meta_scale

    def forward(self, pooled_image: np.ndarray, metadata_vec: np.ndarray) -> PredictiveDistribution:
        pooled = np.asarray(pooled_image, dtype=np.float64)
        meta = np.asarray(metadata_vec, dtype=np.float64)
        if pooled.shape != (self.config.embedding_dim,):
            raise ValueError(f"pooled image shape {pooled.shape} != ({self.config.embedding_dim},)")
        if meta.shape != (self.meta_width,):
            raise ValueError(f"metadata vector shape {meta.shape} != ({self.meta_width},)")
        probs, _ = _forward_cached(self.weights, self.config, pooled[None, :], self.normalize_meta(meta)[None, :])
        return PredictiveDistribution(probs=probs[0])

    def predict(
        self,
        images: Sequence[np.ndarray],
        answers: Mapping[int, AnswerValue],
        schema: MetadataSchema,
    ) -> PredictiveDistribution:
        pooled = pool_image_embeddings(images, dim=self.config.embedding_dim)
        meta = encode_metadata(answers, schema)
        return self.forward(pooled, meta)

    def predict_encoded_batch(self, pooled_image: np.ndarray, meta_matrix: np.ndarray) -> np.ndarray:
        """Probability rows for one pooled image against many metadata vectors."""
        pooled = np.asarray(pooled_image, dtype=np.float64)
        meta = np.asarray(meta_matrix, dtype=np.float64)
        pooled_rows = np.broadcast_to(pooled[None, :], (meta.shape[0], pooled.shape[0]))
        probs, _ = _forward_cached(self.weights, self.config, pooled_rows, self.normalize_meta(meta))
        return probs

    def predict_encoded_pairs(self, pooled_matrix: np.ndarray, meta_matrix: np.ndarray) -> np.ndarray:
        """Probability rows for paired (pooled image, metadata vector) rows."""
        pooled = np.asarray(pooled_matrix, dtype=np.float64)
        meta = np.asarray(meta_matrix, dtype=np.float64)
        probs, _ = _forward_cached(self.weights, self.config, pooled, self.normalize_meta(meta))
        return probs

    @property
    def meta_width(self) -> int:
        return self.weights["w_meta"].shape[0]

    # -- serialization -----------------------------------------------------

    def to_json_dict(self) -> dict:
        return {
            "config": asdict(self.config),
            "schema_fingerprint": self.schema_fingerprint,
            "meta_center": [float(x) for x in self.meta_center],
            "meta_scale": [float(x) for x in self.meta_scale],
            "weights": {
                name: {"shape": list(arr.shape), "data": [float(x) for x in arr.ravel()]}
                for name, arr in sorted(self.weights.items())
            },
        }

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_dict(), fh, separators=(",", ":"), sort_keys=True)
            fh.write("\n")

    @classmethod
    def from_json_dict(cls, doc: dict) -> "TrainedModel":
        config = ModelConfig(**doc["config"])
        weights = {
            name: np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
            for name, entry in doc["weights"].items()
        }
        return cls(
            config=config,
            schema_fingerprint=doc["schema_fingerprint"],
            weights=weights,
            meta_center=np.asarray(doc["meta_center"], dtype=np.float64),
            meta_scale=np.asarray(doc["meta_scale"], dtype=np.float64),
        )

    @classmethod
    def load(cls, path: str | Path, schema: MetadataSchema | None = None) -> "TrainedModel":
        with open(path, "r", encoding="utf-8") as fh:
            model = cls.from_json_dict(json.load(fh))
        if schema is not None and schema.fingerprint() != model.schema_fingerprint:
            raise ValueError("model was trained against a different metadata schema")
        return model


def loss_and_gradients(
    model: TrainedModel, batch: tuple[np.ndarray, np.ndarray, np.ndarray]
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean softmax cross-entropy over the batch plus analytic gradients.

    ``batch`` is (pooled images (B,D), encoded metadata (B,W), labels (B,)).
    """
    pooled, meta, labels = batch
    pooled = np.asarray(pooled, dtype=np.float64)
    meta = model.normalize_meta(np.asarray(meta, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        raise ValueError("batch must be non-empty")
    config, weights = model.config, model.weights
    n = len(labels)

    probs, cache = _forward_cached(weights, config, pooled, meta)
    picked = np.clip(probs[np.arange(n), labels], 1e-300, None)
    loss = float(-np.mean(np.log(picked)))

    dlogits = probs.copy()
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n

    grads: dict[str, np.ndarray] = {}
    grads["w2"] = cache["h"].T @ dlogits
    grads["b2"] = dlogits.sum(axis=0)
    dh = dlogits @ weights["w2"].T
    dh_pre = dh * (cache["h_pre"] > 0.0)
    grads["w1"] = cache["z"].T @ dh_pre
    grads["b1"] = dh_pre.sum(axis=0)
    dz = dh_pre @ weights["w1"].T

    if config.fusion == "concat":
        de = dz[:, config.embedding_dim :]
    else:
        dgamma = dz * cache["pooled"]
        dbeta = dz
        grads["w_gamma"] = cache["e"].T @ dgamma
        grads["b_gamma"] = dgamma.sum(axis=0)
        grads["w_beta"] = cache["e"].T @ dbeta
        grads["b_beta"] = dbeta.sum(axis=0)
        de = dgamma @ weights["w_gamma"].T + dbeta @ weights["w_beta"].T

    de_pre = de * (cache["e_pre"] > 0.0)
    grads["w_meta"] = cache["meta"].T @ de_pre
    grads["b_meta"] = de_pre.sum(axis=0)
    return loss, grads


def _masked_example(
    case: Case,
    schema: MetadataSchema,
    config: ModelConfig,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """One training view of a case: random field masking + image withholding."""
    keep_mask = rng.random(len(schema)) >= config.mask_prob
    answers = {fid: ans for fid, ans in case.metadata.items() if keep_mask[fid]}
    kept_images = [case.images[0].embedding]
    for img in case.images[1:]:
        if rng.random() >= config.image_drop_prob:
            kept_images.append(img.embedding)
    pooled = pool_image_embeddings(kept_images, dim=config.embedding_dim)
    return pooled, encode_metadata(answers, schema)


def full_input_arrays(
    cases: Sequence[Case], schema: MetadataSchema, config: ModelConfig
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pooled embeddings, encoded metadata, and labels with every input present."""
    pooled = np.stack(
        [pool_image_embeddings([img.embedding for img in c.images], dim=config.embedding_dim) for c in cases]
    )
    meta = np.stack([encode_metadata(c.metadata, schema) for c in cases])
    labels = np.asarray([c.label for c in cases], dtype=np.int64)
    return pooled, meta, labels


def _topk_correct(probs: np.ndarray, labels: np.ndarray, k: int) -> float:
    n, c = probs.shape
    order = np.argsort(-probs, axis=1, kind="stable")[:, :k]
    return float(np.mean([labels[i] in order[i] for i in range(n)]))


def train(
    dataset: Sequence[Case],
    schema: MetadataSchema,
    config: ModelConfig,
    validation: Sequence[Case] | None = None,
    eval_every: int | None = None,
) -> TrainedModel:
    """Train the classifier; selects the checkpoint with best validation Top-3.

    Deterministic for a fixed config seed. Raises TrainingError on an empty
    dataset or when the loss goes non-finite (with the failing step index).
    """
    if len(dataset) == 0:
        raise TrainingError("cannot train on an empty dataset")
    for case in dataset:
        if not 0 <= case.label < config.num_classes:
            raise TrainingError(f"case {case.case_id} label {case.label} outside 0..{config.num_classes - 1}")

    rng = np.random.default_rng(config.seed)
    meta_width = schema.encoded_width
    weights = init_weights(config, meta_width, rng)
    velocity = {name: np.zeros_like(arr) for name, arr in weights.items()}
    center, scale = meta_normalization(schema)
    model = TrainedModel(
        config=config,
        schema_fingerprint=schema.fingerprint(),
        weights=weights,
        meta_center=center,
        meta_scale=scale,
    )

    if validation is not None and len(validation) > 0:
        val_arrays = full_input_arrays(validation, schema, config)
    else:
        val_arrays = None
    if eval_every is None:
        eval_every = max(1, config.steps // 20)

    best_top3 = -1.0
    best_weights: dict[str, np.ndarray] | None = None

    for t in range(config.steps):
        idx = rng.integers(0, len(dataset), size=config.batch_size)
        pooled_rows, meta_rows, labels = [], [], []
        for i in idx:
            case = dataset[int(i)]
            pooled, meta = _masked_example(case, schema, config, rng)
            pooled_rows.append(pooled)
            meta_rows.append(meta)
            labels.append(case.label)
        batch = (np.stack(pooled_rows), np.stack(meta_rows), np.asarray(labels))

        loss, grads = loss_and_gradients(model, batch)
        if not np.isfinite(loss):
            raise TrainingError(f"non-finite loss at step {t}")

        lr = config.learning_rate * config.decay_factor ** (t / config.steps)
        for name, g in grads.items():
            velocity[name] = config.momentum * velocity[name] - lr * g
            weights[name] = weights[name] * (1.0 - lr * config.weight_decay) + velocity[name]
        model.weights = weights

        if val_arrays is not None and ((t + 1) % eval_every == 0 or t == config.steps - 1):
            probs, _ = _forward_cached(weights, config, val_arrays[0], model.normalize_meta(val_arrays[1]))
            top3 = _topk_correct(probs, val_arrays[2], min(3, config.num_classes))
            if top3 > best_top3:
                best_top3 = top3
                best_weights = {name: arr.copy() for name, arr in weights.items()}

    if best_weights is not None:
        model.weights = best_weights
    return model
