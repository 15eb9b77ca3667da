"""Attention head tests against hand-rolled numpy oracles."""

import numpy as np
import pytest

from adl import attention as att
from adl.autodiff import Tape, Tensor, backward
from adl.errors import ConfigError, NumericError


@pytest.fixture
def rng():
    return np.random.default_rng(11)


def oracle_soft_map(feats, weight):
    """Independent computation: per-cell dot product, per-slice softmax."""
    logits = np.tensordot(feats, weight, axes=(-1, 0))
    out = np.zeros_like(logits)
    for t in range(logits.shape[0]):
        z = logits[t] - logits[t].max()
        e = np.exp(z)
        out[t] = e / e.sum()
    return out


class TestSoftAttention:
    def test_matches_oracle(self, rng):
        feats = rng.standard_normal((4, 6, 6, 8))
        params = att.AttentionParams(weight=Tensor(rng.standard_normal(8), dtype=np.float64))
        amap = att.soft_attention(Tensor(feats, dtype=np.float64), params)
        assert np.allclose(amap.data, oracle_soft_map(feats, params.weight.data), atol=1e-12)

    def test_valid_distribution(self, rng):
        feats = rng.standard_normal((4, 6, 6, 8)).astype(np.float32) * 5
        params = att.init_attention(8, rng)
        amap = att.soft_attention(Tensor(feats), params)
        assert np.all(amap.data >= 0)
        assert np.allclose(amap.data.sum(axis=(-2, -1)), 1.0, atol=1e-5)

    def test_constant_features_give_uniform_map(self, rng):
        feats = np.ones((3, 4, 4, 6), dtype=np.float32)
        params = att.init_attention(6, rng)
        amap = att.soft_attention(Tensor(feats), params)
        assert np.allclose(amap.data, 1.0 / 16, atol=1e-6)

    def test_expected_equals_soft_values(self, rng):
        feats = rng.standard_normal((4, 5, 5, 8))
        params = att.AttentionParams(weight=Tensor(rng.standard_normal(8), dtype=np.float64))
        soft = att.soft_attention(Tensor(feats, dtype=np.float64), params)
        expected = att.prob_attention_expected(Tensor(feats, dtype=np.float64), params)
        assert np.array_equal(soft.data, expected.data)
        assert expected.kind == "expected"

    def test_init_scale(self):
        params = att.init_attention(512, np.random.default_rng(0))
        assert abs(float(np.std(params.weight.data)) - 0.01) < 0.002
        assert np.linalg.norm(params.weight.data) > 0


class TestProbAttention:
    def test_sample_is_valid_distribution(self, rng):
        feats = rng.standard_normal((4, 6, 6, 8)).astype(np.float32)
        params = att.init_attention(8, rng)
        amap = att.prob_attention_sample(Tensor(feats), params, temperature=1.0, rng=rng)
        assert amap.kind == "sample"
        assert np.all(amap.data >= 0)
        assert np.allclose(amap.data.sum(axis=(-2, -1)), 1.0, atol=1e-5)

    def test_low_temperature_concentrates(self, rng):
        feats = rng.standard_normal((2, 4, 4, 8)).astype(np.float32)
        params = att.init_attention(8, rng)
        amap = att.prob_attention_sample(Tensor(feats), params, temperature=0.05, rng=rng)
        assert np.all(amap.data.max(axis=(-2, -1)) > 0.95)

    def test_argmax_follows_expected_map(self, rng):
        # small-sample version of the categorical-fidelity check
        logits = np.log(np.array([[[0.6, 0.2], [0.1, 0.1]]], dtype=np.float64))
        feats = logits[..., None]  # single channel
        params = att.AttentionParams(weight=Tensor(np.ones(1), dtype=np.float64))
        counts = np.zeros(4)
        n = 2000
        for _ in range(n):
            amap = att.prob_attention_sample(Tensor(feats, dtype=np.float64), params,
                                             temperature=0.5, rng=rng)
            counts[np.argmax(amap.data[0])] += 1
        freq = counts / n
        assert np.abs(freq - [0.6, 0.2, 0.1, 0.1]).max() < 0.05

    def test_bad_temperature_rejected(self, rng):
        feats = Tensor(rng.standard_normal((2, 3, 3, 4)).astype(np.float32))
        params = att.init_attention(4, rng)
        for temp in (0.0, -1.0):
            with pytest.raises(ConfigError):
                att.prob_attention_sample(feats, params, temperature=temp, rng=rng)

    def test_gradient_flows_through_sample(self, rng):
        feats = Tensor(rng.standard_normal((2, 3, 3, 4)).astype(np.float32))
        params = att.init_attention(4, rng)
        from adl import autodiff as ad
        with Tape() as tape:
            amap = att.prob_attention_sample(feats, params, temperature=1.0, rng=rng)
            loss = ad.tsum(ad.mul(amap.values, amap.values))
        backward(loss, tape)
        assert params.weight.grad is not None
        assert np.any(params.weight.grad != 0)

    def test_sample_deterministic_under_seed(self, rng):
        feats = rng.standard_normal((2, 3, 3, 4)).astype(np.float32)
        params = att.init_attention(4, rng)
        a = att.prob_attention_sample(Tensor(feats), params, temperature=1.0,
                                      rng=np.random.default_rng(5))
        b = att.prob_attention_sample(Tensor(feats), params, temperature=1.0,
                                      rng=np.random.default_rng(5))
        assert np.array_equal(a.data, b.data)


class TestGumbelNoise:
    def test_matches_formula(self):
        from adl.ops import gumbel_noise
        seed = 123
        g = gumbel_noise((1000,), np.random.default_rng(seed), dtype=np.float64)
        u = np.clip(np.random.default_rng(seed).random(1000), 1e-12, 1 - 1e-12)
        assert np.allclose(g, -np.log(-np.log(u)))

    def test_location_scale(self):
        from adl.ops import gumbel_noise
        g = gumbel_noise((200000,), np.random.default_rng(0), dtype=np.float64)
        euler = 0.5772156649
        assert abs(g.mean() - euler) < 0.02
        assert abs(g.std() - np.pi / np.sqrt(6)) < 0.02


class TestMapValidation:
    def test_negative_rejected(self):
        bad = np.full((1, 2, 2), 0.25)
        bad[0, 0, 0] = -0.25
        bad[0, 1, 1] = 0.75
        with pytest.raises(NumericError):
            att.AttentionMap(Tensor(bad), "soft")

    def test_unnormalized_rejected(self):
        bad = np.full((1, 2, 2), 0.3)
        with pytest.raises(NumericError):
            att.AttentionMap(Tensor(bad), "soft")

    def test_uniform_map_helper(self):
        m = att.uniform_map((3, 4, 4))
        assert np.allclose(m.data, 1.0 / 16)
        assert m.kind == "reference"

    def test_reference_map_is_frozen_copy(self, rng):
        src = Tensor(np.full((2, 2, 2), 0.25, dtype=np.float32), requires_grad=True)
        ref = att.reference_map(src)
        assert not ref.values.requires_grad
        src.data[0, 0, 0] = 9.0
        assert ref.data[0, 0, 0] == 0.25
