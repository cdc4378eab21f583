"""Divergence metric tests: hand-computed values and properties."""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mint.divergence import (
    MetricKind,
    entropy_bits,
    entropy_diff,
    js_distance,
    kl,
    metric_batch,
    parse_metric,
)

# Hand-evaluated closed forms:
#   KL([0.5,0.5] || [0.9,0.1]) = 0.5*ln(5/9) + 0.5*ln(5)       = 0.510826 nats
#   JSD([0.5,0.5], [0.9,0.1])  = 0.146793 bits -> distance sqrt = 0.383135
#   H2([0.5,0.5]) = 1, H2([0.9,0.1]) = 0.468996 -> diff         = 0.531004 bits
KL_HALF_VS_91 = 0.5 * math.log(5.0 / 9.0) + 0.5 * math.log(5.0)
JSD_HALF_VS_91 = 0.383135
ENT_HALF_VS_91 = 0.531004


class TestKL:
    def test_identity_zero(self):
        assert kl([0.3, 0.7], [0.3, 0.7]) == pytest.approx(0.0, abs=1e-12)

    def test_hand_value(self):
        assert kl([0.5, 0.5], [0.9, 0.1]) == pytest.approx(0.510825, abs=1e-6)
        assert kl([0.5, 0.5], [0.9, 0.1]) == pytest.approx(KL_HALF_VS_91, abs=1e-12)

    def test_clamped_zero_entry(self):
        # one-hot against uniform: the clamp keeps the zero entry finite
        assert kl([1.0, 0.0], [0.5, 0.5]) == pytest.approx(math.log(2.0), abs=1e-9)

    def test_clamp_insensitive_below_1e9(self):
        base = kl([1.0, 0.0], [0.5, 0.5])
        for tiny in (1e-9, 1e-10, 1e-11):
            assert kl([1.0 - tiny, tiny], [0.5, 0.5]) == pytest.approx(base, abs=1e-7)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            kl([0.5, 0.5], [1.0, 0.0, 0.0])


class TestJSDistance:
    def test_identity_zero(self):
        assert js_distance([0.2, 0.8], [0.2, 0.8]) == pytest.approx(0.0, abs=1e-9)

    def test_hand_value(self):
        assert js_distance([0.5, 0.5], [0.9, 0.1]) == pytest.approx(JSD_HALF_VS_91, abs=1e-6)

    def test_disjoint_support_maximum(self):
        assert js_distance([1.0, 0.0], [0.0, 1.0]) == pytest.approx(1.0, abs=1e-5)

    def test_symmetric(self):
        assert js_distance([0.3, 0.7], [0.6, 0.4]) == pytest.approx(js_distance([0.6, 0.4], [0.3, 0.7]), abs=1e-15)


class TestEntropyDiff:
    def test_identity_zero(self):
        assert entropy_diff([0.4, 0.6], [0.4, 0.6]) == 0.0

    def test_hand_value(self):
        assert entropy_diff([0.5, 0.5], [0.9, 0.1]) == pytest.approx(ENT_HALF_VS_91, abs=1e-6)

    def test_blind_to_permutation(self):
        # entropy is permutation-invariant, so flipping the distribution is
        # invisible to this metric; this is exactly its known weakness
        assert entropy_diff([0.9, 0.1], [0.1, 0.9]) == pytest.approx(0.0, abs=1e-12)

    def test_symmetric(self):
        assert entropy_diff([0.3, 0.7], [0.8, 0.2]) == entropy_diff([0.8, 0.2], [0.3, 0.7])

    def test_entropy_zero_convention(self):
        assert entropy_bits([1.0, 0.0]) == 0.0


def distributions(n=4):
    return (
        st.lists(st.floats(1e-6, 1.0), min_size=n, max_size=n)
        .map(lambda xs: np.asarray(xs) / np.sum(xs))
    )


class TestProperties:
    @settings(max_examples=200, deadline=None)
    @given(distributions(), distributions(), distributions())
    def test_js_triangle_inequality(self, p, q, r):
        assert js_distance(p, r) <= js_distance(p, q) + js_distance(q, r) + 1e-9

    @settings(max_examples=100, deadline=None)
    @given(distributions(), distributions())
    def test_zero_class_append_invariance(self, p, q):
        p_ext = np.concatenate([p, [0.0]])
        q_ext = np.concatenate([q, [0.0]])
        assert kl(p_ext, q_ext) == pytest.approx(kl(p, q), abs=1e-6)
        assert js_distance(p_ext, q_ext) == pytest.approx(js_distance(p, q), abs=1e-6)
        assert entropy_diff(p_ext, q_ext) == pytest.approx(entropy_diff(p, q), abs=1e-6)

    @settings(max_examples=100, deadline=None)
    @given(distributions(), distributions())
    def test_non_negative(self, p, q):
        assert kl(p, q) >= 0.0
        assert 0.0 <= js_distance(p, q) <= 1.0
        assert entropy_diff(p, q) >= 0.0


class TestBatchConsistency:
    def test_batch_matches_pairwise(self):
        rng = np.random.default_rng(0)
        p = rng.dirichlet(np.ones(5))
        rows = rng.dirichlet(np.ones(5), size=8)
        for kind, pair_fn in ((MetricKind.KL, kl), (MetricKind.JS, js_distance), (MetricKind.ENTROPY, entropy_diff)):
            batch = metric_batch(kind, p, rows)
            for i in range(8):
                assert batch[i] == pytest.approx(pair_fn(p, rows[i]), abs=1e-12)


class TestParse:
    def test_tokens(self):
        assert parse_metric("kl") == MetricKind.KL
        assert parse_metric("js") == MetricKind.JS
        assert parse_metric("entropy") == MetricKind.ENTROPY

    def test_unknown_token(self):
        with pytest.raises(ValueError, match="kl, js, entropy"):
            parse_metric("hellinger")
