"""Distance metrics between predictive distributions.

Three metrics score how much a hypothetical new input would move the
classifier's predictive distribution: KL divergence (nats), Jensen-Shannon
distance (the square root of the base-2 JS divergence, bounded [0,1]), and
the absolute difference in predictive entropy (bits). Units differ across
metrics; thresholds are always calibrated in the same unit as the metric
they gate, so the system is internally consistent.
"""

from __future__ import annotations

from enum import Enum

import numpy as np

EPS = 1e-12


class MetricKind(str, Enum):
    KL = "kl"
    JS = "js"
    ENTROPY = "entropy"


def _as_rows(p) -> np.ndarray:
    arr = np.asarray(p, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    return arr


def _clamp_rows(rows: np.ndarray) -> np.ndarray:
    """Clamp entries below EPS then renormalize each row."""
    clamped = np.maximum(rows, EPS)
    return clamped / clamped.sum(axis=1, keepdims=True)


def _check_lengths(p: np.ndarray, q: np.ndarray) -> None:
    if p.shape[-1] != q.shape[-1]:
        raise ValueError(f"distribution length mismatch: {p.shape[-1]} vs {q.shape[-1]}")


def kl_batch(p, q) -> np.ndarray:
    """Row-wise KL(p || q) in nats with EPS clamping; broadcasts p against q rows."""
    p_rows, q_rows = _as_rows(p), _as_rows(q)
    _check_lengths(p_rows, q_rows)
    p_rows, q_rows = np.broadcast_arrays(p_rows, q_rows)
    pc, qc = _clamp_rows(p_rows), _clamp_rows(q_rows)
    return np.maximum(np.sum(pc * (np.log(pc) - np.log(qc)), axis=1), 0.0)


def kl(p, q) -> float:
    """Kullback-Leibler divergence KL(p || q) in nats; >= 0."""
    p_arr, q_arr = _probs_of(p), _probs_of(q)
    return float(kl_batch(p_arr, q_arr)[0])


def _kl2_rows(p_rows: np.ndarray, q_rows: np.ndarray) -> np.ndarray:
    """Row-wise base-2 KL for already-clamped rows."""
    return np.sum(p_rows * (np.log2(p_rows) - np.log2(q_rows)), axis=1)


def js_distance_batch(p, q) -> np.ndarray:
    """Row-wise Jensen-Shannon distance (base-2, sqrt of divergence), in [0,1]."""
    p_rows, q_rows = _as_rows(p), _as_rows(q)
    _check_lengths(p_rows, q_rows)
    p_rows, q_rows = np.broadcast_arrays(p_rows, q_rows)
    pc, qc = _clamp_rows(p_rows), _clamp_rows(q_rows)
    m = 0.5 * (pc + qc)
    jsd = 0.5 * _kl2_rows(pc, m) + 0.5 * _kl2_rows(qc, m)
    return np.sqrt(np.clip(jsd, 0.0, 1.0))


def js_distance(p, q) -> float:
    """Jensen-Shannon distance: sqrt(JS divergence with base-2 logs); symmetric."""
    p_arr, q_arr = _probs_of(p), _probs_of(q)
    return float(js_distance_batch(p_arr, q_arr)[0])


def entropy_bits(p) -> float:
    """Shannon entropy in bits with the 0*log(0) := 0 convention."""
    return float(entropy_bits_batch(_probs_of(p))[0])


def entropy_bits_batch(p) -> np.ndarray:
    rows = _as_rows(p)
    terms = np.where(rows > 0.0, rows * np.log2(np.where(rows > 0.0, rows, 1.0)), 0.0)
    return -np.sum(terms, axis=1)


def entropy_diff_batch(p, q) -> np.ndarray:
    p_rows, q_rows = _as_rows(p), _as_rows(q)
    _check_lengths(p_rows, q_rows)
    hp = entropy_bits_batch(p_rows)
    hq = entropy_bits_batch(q_rows)
    return np.abs(np.broadcast_arrays(hp, hq)[0] - hq)


def entropy_diff(p, q) -> float:
    """Absolute difference in predictive entropy, in bits."""
    p_arr, q_arr = _probs_of(p), _probs_of(q)
    return float(entropy_diff_batch(p_arr, q_arr)[0])


_BATCH_FNS = {
    MetricKind.KL: kl_batch,
    MetricKind.JS: js_distance_batch,
    MetricKind.ENTROPY: entropy_diff_batch,
}

_PAIR_FNS = {
    MetricKind.KL: kl,
    MetricKind.JS: js_distance,
    MetricKind.ENTROPY: entropy_diff,
}


def metric_batch(kind: MetricKind, p_current, q_rows) -> np.ndarray:
    """Metric between one current distribution and a batch of new ones."""
    return _BATCH_FNS[MetricKind(kind)](p_current, q_rows)


def metric_pair(kind: MetricKind, p, q) -> float:
    return _PAIR_FNS[MetricKind(kind)](p, q)


def parse_metric(token: str) -> MetricKind:
    try:
        return MetricKind(token.lower())
    except ValueError:
        allowed = ", ".join(m.value for m in MetricKind)
        raise ValueError(f"unknown metric {token!r}; expected one of: {allowed}") from None


def _probs_of(p) -> np.ndarray:
    probs = getattr(p, "probs", p)
    return np.asarray(probs, dtype=np.float64)
