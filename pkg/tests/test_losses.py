"""Objective tests: divergence identities, breakdown consistency, featmatch."""

import numpy as np
import pytest

from adl import autodiff as ad
from adl import losses
from adl.attention import reference_map, uniform_map
from adl.autodiff import Tape, Tensor, backward
from adl.errors import ConfigError
from adl.recognition import ClassDistribution
from adl import ops

from _oracles import check_grads


@pytest.fixture
def rng():
    return np.random.default_rng(31)


def random_map(rng, shape):
    raw = rng.random(shape) + 0.01
    return raw / raw.sum(axis=(-2, -1), keepdims=True)


class TestKlIdentities:
    def test_self_divergence_zero(self, rng):
        p = random_map(rng, (4, 8, 8))
        out = losses.kl_per_slice(Tensor(p, dtype=np.float64), Tensor(p, dtype=np.float64))
        assert abs(out.item()) < 1e-9

    @pytest.mark.parametrize("n", [2, 4, 8])
    def test_delta_against_uniform(self, n):
        delta = np.zeros((1, n, n))
        delta[0, n // 2, n // 2] = 1.0
        uni = np.full((1, n, n), 1.0 / (n * n))
        out = losses.kl_per_slice(Tensor(delta, dtype=np.float64),
                                  Tensor(uni, dtype=np.float64))
        assert np.isclose(out.item(), np.log(n * n), atol=1e-6)

    def test_asymmetry(self, rng):
        p = random_map(rng, (2, 4, 4))
        q = random_map(rng, (2, 4, 4))
        pq = losses.kl_per_slice(Tensor(p, dtype=np.float64), Tensor(q, dtype=np.float64))
        qp = losses.kl_per_slice(Tensor(q, dtype=np.float64), Tensor(p, dtype=np.float64))
        assert not np.isclose(pq.item(), qp.item())
        assert pq.item() > 0 and qp.item() > 0

    def test_accepts_attention_map_wrappers(self, rng):
        p = random_map(rng, (2, 4, 4)).astype(np.float32)
        wrapped = reference_map(p)
        out = losses.kl_per_slice(wrapped, uniform_map((2, 4, 4)))
        direct = losses.kl_per_slice(Tensor(p), uniform_map((2, 4, 4)))
        assert np.isclose(out.item(), direct.item())


class TestDefaultLambda:
    def test_desk_grid(self):
        assert losses.default_lambda((4, 8, 8)) == pytest.approx(1.0 / 256)

    def test_general(self):
        assert losses.default_lambda((2, 3, 5)) == pytest.approx(1.0 / 30)


class TestTotalLoss:
    def _setup(self, rng, batch=2, classes=6, grid=(4, 8, 8)):
        probs_raw = rng.random((batch, classes)) + 0.05
        probs = Tensor(probs_raw / probs_raw.sum(axis=1, keepdims=True), dtype=np.float64)
        labels = rng.integers(0, classes, size=batch)
        a_m = Tensor(random_map(rng, (batch,) + grid), dtype=np.float64)
        a_t = reference_map(random_map(rng, (batch,) + grid))
        a_a = Tensor(random_map(rng, (batch,) + grid), dtype=np.float64)
        return probs, labels, a_m, a_t, a_a

    def test_breakdown_identity(self, rng):
        probs, labels, a_m, a_t, a_a = self._setup(rng)
        total, br = losses.total_loss(ClassDistribution(probs), labels, a_m, a_t, a_a,
                                      grid_shape=(4, 8, 8))
        recomposed = br.ce + br.lambda_distill * br.kl_distill + br.lambda_uniform * br.kl_uniform
        assert abs(br.total - recomposed) < 1e-6
        assert np.isclose(total.item(), br.total)

    def test_default_weights_are_inverse_grid(self, rng):
        probs, labels, a_m, a_t, a_a = self._setup(rng)
        _, br = losses.total_loss(ClassDistribution(probs), labels, a_m, a_t, a_a,
                                  grid_shape=(4, 8, 8))
        assert br.lambda_distill == pytest.approx(1.0 / 256)
        assert br.lambda_uniform == pytest.approx(1.0 / 256)

    def test_zero_distill_weight_ignores_teacher(self, rng):
        probs, labels, a_m, _, a_a = self._setup(rng)
        teacher = Tensor(random_map(rng, (2, 4, 8, 8)), dtype=np.float64,
                         requires_grad=True)
        with Tape() as tape:
            total, _ = losses.total_loss(ClassDistribution(probs), labels, a_m,
                                         teacher, a_a, grid_shape=(4, 8, 8),
                                         lambda_distill=0.0)
        backward(total, tape)
        assert teacher.grad is None or np.allclose(teacher.grad, 0.0)

    def test_perfect_prediction_and_matching_maps(self, rng):
        # CE at the clamp-free optimum, zero distill gap, uniform appearance
        probs = Tensor(np.array([[1.0, 0.0, 0.0]]), dtype=np.float64)
        a_m = Tensor(random_map(rng, (1, 2, 4, 4)), dtype=np.float64)
        a_t = reference_map(a_m.data)
        a_a = Tensor(np.full((1, 2, 4, 4), 1.0 / 16), dtype=np.float64)
        total, br = losses.total_loss(ClassDistribution(probs, validate=False),
                                      np.array([0]), a_m, a_t, a_a,
                                      grid_shape=(2, 4, 4))
        assert abs(br.ce) < 1e-12
        assert abs(br.kl_distill) < 1e-9
        assert abs(br.kl_uniform) < 1e-9
        assert abs(total.item()) < 1e-9

    def test_gradients_through_objective(self, rng):
        grid = (2, 3, 3)
        labels = np.array([1, 0])
        teacher = random_map(rng, (2,) + grid)

        def build(logits_cls, logits_m, logits_a):
            probs = ops.softmax_classes(logits_cls)
            a_m = ops.softmax_slices(logits_m)
            a_a = ops.softmax_slices(logits_a)
            total, _ = losses.total_loss(probs, labels, a_m,
                                         Tensor(teacher, dtype=np.float64), a_a,
                                         grid_shape=grid)
            return total

        check_grads(build,
                    [rng.standard_normal((2, 4)), rng.standard_normal((2,) + grid),
                     rng.standard_normal((2,) + grid)])


class TestFeatMatch:
    def oracle(self, fs, ft):
        """Independent implementation for a single sample."""
        ms = np.abs(fs).max(axis=-1).reshape(-1)
        mt = np.abs(ft).max(axis=-1).reshape(-1)
        ms = ms / max(np.linalg.norm(ms), 1e-12)
        mt = mt / max(np.linalg.norm(mt), 1e-12)
        return float(((ms - mt) ** 2).sum())

    def test_matches_oracle(self, rng):
        fs = rng.standard_normal((3, 4, 4, 6))
        ft = rng.standard_normal((3, 4, 4, 6))
        got = losses.featmatch_loss(Tensor(fs, dtype=np.float64), Tensor(ft, dtype=np.float64))
        assert np.isclose(got.item(), self.oracle(fs, ft), atol=1e-10)

    def test_batch_average(self, rng):
        fs = rng.standard_normal((4, 2, 3, 3, 5))
        ft = rng.standard_normal((4, 2, 3, 3, 5))
        got = losses.featmatch_loss(Tensor(fs, dtype=np.float64), Tensor(ft, dtype=np.float64))
        want = np.mean([self.oracle(fs[i], ft[i]) for i in range(4)])
        assert np.isclose(got.item(), want, atol=1e-10)

    def test_identical_features_zero(self, rng):
        f = rng.standard_normal((2, 3, 3, 4))
        got = losses.featmatch_loss(Tensor(f, dtype=np.float64), Tensor(f, dtype=np.float64))
        assert abs(got.item()) < 1e-12

    def test_scale_invariance(self, rng):
        fs = rng.standard_normal((2, 3, 3, 4))
        ft = rng.standard_normal((2, 3, 3, 4))
        base = losses.featmatch_loss(Tensor(fs, dtype=np.float64),
                                     Tensor(ft, dtype=np.float64))
        scaled = losses.featmatch_loss(Tensor(fs * 37.5, dtype=np.float64),
                                       Tensor(ft * 0.003, dtype=np.float64))
        assert np.isclose(base.item(), scaled.item(), atol=1e-9)

    def test_grid_mismatch_rejected(self, rng):
        with pytest.raises(ConfigError):
            losses.featmatch_loss(Tensor(rng.standard_normal((2, 3, 3, 4))),
                                  Tensor(rng.standard_normal((2, 3, 4, 4))))

    def test_gradients(self, rng):
        fs = rng.standard_normal((2, 2, 3, 4)) + 0.3
        ft = rng.standard_normal((2, 2, 3, 4)) + 0.3

        def build(a, b):
            return losses.featmatch_loss(a, b)

        check_grads(build, [fs, ft])


class TestCrossEntropyWrapper:
    def test_accepts_class_distribution(self, rng):
        raw = rng.random((2, 4)) + 0.1
        probs = raw / raw.sum(axis=1, keepdims=True)
        wrapped = ClassDistribution(Tensor(probs, dtype=np.float64))
        a = losses.cross_entropy(wrapped, np.array([0, 2]))
        b = losses.cross_entropy(Tensor(probs, dtype=np.float64), np.array([0, 2]))
        assert np.isclose(a.item(), b.item())
