"""Evaluation harness: accuracy curves, histograms, and behavior statistics.

The statistical tests are self-contained: ANOVA p-values come from seeded
permutation tests, Spearman and chi-square p-values from series /
continued-fraction evaluations of the incomplete beta and gamma functions.
At desk-scale n that is cheap and avoids a stats-library dependency.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .engine import EpisodeTranscript

_EPS = 3e-14
_FPMIN = 1e-300
_MAX_ITER = 500


# --------------------------------------------------------------------------
# Special functions (regularized incomplete beta / gamma)
# --------------------------------------------------------------------------


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta function (Lentz)."""
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _FPMIN:
        d = _FPMIN
    d = 1.0 / d
    h = d
    for m in range(1, _MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < _FPMIN:
            d = _FPMIN
        c = 1.0 + aa / c
        if abs(c) < _FPMIN:
            c = _FPMIN
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < _FPMIN:
            d = _FPMIN
        c = 1.0 + aa / c
        if abs(c) < _FPMIN:
            c = _FPMIN
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            break
    return h


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_bt = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log(1.0 - x)
    bt = math.exp(ln_bt)
    if x < (a + 1.0) / (a + b + 2.0):
        return bt * _betacf(a, b, x) / a
    return 1.0 - bt * _betacf(b, a, 1.0 - x) / b


def _gamma_p_series(a: float, x: float) -> float:
    ap = a
    total = delta = 1.0 / a
    for _ in range(_MAX_ITER):
        ap += 1.0
        delta *= x / ap
        total += delta
        if abs(delta) < abs(total) * _EPS:
            break
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))


def _gamma_q_contfrac(a: float, x: float) -> float:
    b = x + 1.0 - a
    c = 1.0 / _FPMIN
    d = 1.0 / b
    h = d
    for i in range(1, _MAX_ITER + 1):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < _FPMIN:
            d = _FPMIN
        c = b + an / c
        if abs(c) < _FPMIN:
            c = _FPMIN
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            break
    return h * math.exp(-x + a * math.log(x) - math.lgamma(a))


def gamma_q(a: float, x: float) -> float:
    """Regularized upper incomplete gamma Q(a, x)."""
    if a <= 0.0 or x < 0.0:
        raise ValueError("gamma_q requires a > 0 and x >= 0")
    if x == 0.0:
        return 1.0
    if x < a + 1.0:
        return 1.0 - _gamma_p_series(a, x)
    return _gamma_q_contfrac(a, x)


def chi2_survival(stat: float, df: int) -> float:
    if math.isinf(stat):
        return 0.0
    return gamma_q(df / 2.0, stat / 2.0)


def student_t_two_sided_p(t: float, df: int) -> float:
    if math.isinf(t):
        return 0.0
    return regularized_incomplete_beta(df / 2.0, 0.5, df / (df + t * t))


# --------------------------------------------------------------------------
# Accuracy
# --------------------------------------------------------------------------


def _probs_of(p) -> np.ndarray:
    return np.asarray(getattr(p, "probs", p), dtype=np.float64)


def top_indices(probs: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest probabilities; probability ties break toward
    the lower class index."""
    order = np.lexsort((np.arange(len(probs)), -probs))
    return order[:k]


def topk_accuracy(predictions: Sequence, labels: Sequence[int], k: int) -> float:
    if len(predictions) != len(labels):
        raise ValueError(f"length mismatch: {len(predictions)} predictions vs {len(labels)} labels")
    if len(predictions) == 0:
        raise ValueError("empty prediction set")
    hits = 0
    for pred, label in zip(predictions, labels):
        probs = _probs_of(pred)
        if k > len(probs):
            raise ValueError(f"k={k} exceeds {len(probs)} classes")
        hits += int(label in top_indices(probs, k))
    return hits / len(predictions)


@dataclass(frozen=True)
class CurvePoint:
    n_interactions: int
    top3: float
    n_cases_contributing: int


def interaction_curve(
    transcripts: Sequence[EpisodeTranscript],
    labels: Sequence[int] | None = None,
    k: int = 3,
) -> tuple[list[CurvePoint], float]:
    """Top-k accuracy after each interaction count, plus the normalized AUC.

    Point n scores the prediction each case had after min(n, episode length)
    interactions, so cases that stopped early keep contributing their final
    prediction. AUC is the trapezoid over n rescaled to [0, 1].
    """
    if labels is None:
        labels = [t.label for t in transcripts]
    if len(labels) != len(transcripts):
        raise ValueError("labels must match transcripts")
    sequences = [t.predictions_by_interaction() for t in transcripts]
    max_len = max(len(seq) - 1 for seq in sequences)
    points = []
    for n in range(max_len + 1):
        preds = [seq[min(n, len(seq) - 1)] for seq in sequences]
        points.append(
            CurvePoint(
                n_interactions=n,
                top3=topk_accuracy(preds, labels, k),
                n_cases_contributing=sum(1 for seq in sequences if len(seq) - 1 >= n),
            )
        )
    ys = [p.top3 for p in points]
    auc = float(np.trapezoid(ys, dx=1.0) / max_len) if max_len > 0 else ys[0]
    return points, auc


def input_histogram(transcripts: Sequence[EpisodeTranscript], kind: str) -> dict[int, int]:
    """Bucket counts of acquired inputs per case; values sum to the case count."""
    if kind not in ("images", "metadata"):
        raise ValueError("kind must be 'images' or 'metadata'")
    counts: dict[int, int] = {}
    for t in transcripts:
        n = t.n_images_acquired if kind == "images" else t.n_meta_acquired
        counts[n] = counts.get(n, 0) + 1
    return counts


# --------------------------------------------------------------------------
# Behavior statistics
# --------------------------------------------------------------------------


def _ranks_with_ties(values: Sequence[float]) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    order = np.argsort(arr, kind="stable")
    ranks = np.empty(len(arr), dtype=np.float64)
    i = 0
    sorted_vals = arr[order]
    while i < len(arr):
        j = i
        while j + 1 < len(arr) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman(x: Sequence[float], y: Sequence[float]) -> tuple[float, float]:
    """Rank correlation with average ranks for ties; p from the t approximation."""
    if len(x) != len(y):
        raise ValueError("length mismatch")
    n = len(x)
    if n < 3:
        raise ValueError("need at least 3 observations")
    if len(set(x)) == 1 or len(set(y)) == 1:
        raise ValueError("spearman undefined for constant input")
    rx, ry = _ranks_with_ties(x), _ranks_with_ties(y)
    rx -= rx.mean()
    ry -= ry.mean()
    denom = math.sqrt(float(np.sum(rx**2) * np.sum(ry**2)))
    rho = float(np.sum(rx * ry) / denom)
    if abs(rho) >= 1.0:
        return rho, 0.0
    t = rho * math.sqrt((n - 2) / (1.0 - rho * rho))
    return rho, student_t_two_sided_p(abs(t), n - 2)


def anova_f(
    groups: Sequence[Sequence[float]], n_permutations: int = 10_000, seed: int = 0
) -> tuple[float, float]:
    """One-way ANOVA F statistic; p by a seeded permutation test.

    Degenerate within-group variance yields an infinite F sentinel whose
    permutation p sits at the test's resolution floor.
    """
    if len(groups) < 2 or any(len(g) < 2 for g in groups):
        raise ValueError("need at least 2 groups with at least 2 values each")
    arrays = [np.asarray(g, dtype=np.float64) for g in groups]

    def f_stat(parts: list[np.ndarray]) -> float:
        all_vals = np.concatenate(parts)
        grand = all_vals.mean()
        ssb = sum(len(p) * (p.mean() - grand) ** 2 for p in parts)
        ssw = sum(float(np.sum((p - p.mean()) ** 2)) for p in parts)
        df_between = len(parts) - 1
        df_within = len(all_vals) - len(parts)
        if ssw == 0.0:
            return math.inf if ssb > 0.0 else 0.0
        return float((ssb / df_between) / (ssw / df_within))

    observed = f_stat(arrays)
    pooled = np.concatenate(arrays)
    sizes = [len(a) for a in arrays]
    rng = np.random.default_rng(seed)
    exceed = 0
    for _ in range(n_permutations):
        shuffled = rng.permutation(pooled)
        parts, start = [], 0
        for size in sizes:
            parts.append(shuffled[start : start + size])
            start += size
        if f_stat(parts) >= observed:
            exceed += 1
    p = (exceed + 1) / (n_permutations + 1)
    return observed, p


@dataclass(frozen=True)
class ChiSquareResult:
    stat: float
    p: float
    significant: bool
    df: int
    pooled_zero_expected: bool


def chi_square_question_frequency(
    per_group_ask_counts: Mapping[object, Mapping[int, float]],
    global_ask_counts: Mapping[int, float],
    alpha: float,
    bonferroni_m: int,
) -> dict[object, ChiSquareResult]:
    """Per group: chi-square of its question frequencies against the global mix.

    Expected counts scale the global proportions to the group total.
    Questions with zero global count (zero expected) are pooled into one
    catch-all bucket and flagged; a nonzero observation there makes the
    statistic an infinite sentinel.
    """
    questions = sorted(global_ask_counts)
    global_total = float(sum(global_ask_counts.values()))
    if global_total <= 0:
        raise ValueError("global ask counts are empty")
    results: dict[object, ChiSquareResult] = {}
    for group, counts in per_group_ask_counts.items():
        if set(counts) - set(questions):
            raise ValueError(f"group {group!r} has questions missing from the global counts")
        group_total = float(sum(counts.values()))
        observed, expected = [], []
        pooled_observed = 0.0
        pooled = False
        for q in questions:
            exp = global_ask_counts[q] / global_total * group_total
            obs = float(counts.get(q, 0))
            if exp == 0.0:
                pooled = True
                pooled_observed += obs
            else:
                observed.append(obs)
                expected.append(exp)
        stat = float(sum((o - e) ** 2 / e for o, e in zip(observed, expected)))
        df = len(observed) - 1
        if pooled and pooled_observed > 0.0:
            stat = math.inf
        p = chi2_survival(stat, max(df, 1))
        results[group] = ChiSquareResult(
            stat=stat, p=p, significant=p < alpha / bonferroni_m, df=df, pooled_zero_expected=pooled
        )
    return results


def question_ask_counts(transcripts: Iterable[EpisodeTranscript]) -> dict[int, int]:
    counts: dict[int, int] = {}
    for t in transcripts:
        for fid in t.acquired_field_ids():
            counts[fid] = counts.get(fid, 0) + 1
    return counts


# --------------------------------------------------------------------------
# CSV emission (plotting is external)
# --------------------------------------------------------------------------


def curve_to_csv(points: Sequence[CurvePoint]) -> str:
    lines = ["n_interactions,top3,n_cases_contributing"]
    for p in points:
        lines.append(f"{p.n_interactions},{p.top3},{p.n_cases_contributing}")
    return "\n".join(lines) + "\n"


def histogram_to_csv(hist: Mapping[int, int], kind: str) -> str:
    lines = [f"n_{kind},n_cases"]
    for n in sorted(hist):
        lines.append(f"{n},{hist[n]}")
    return "\n".join(lines) + "\n"
