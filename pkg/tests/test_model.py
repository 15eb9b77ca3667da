"""Network assembly tests: heads, overrides, state round trips, gradients."""

import numpy as np
import pytest

import adl.autodiff as ad
from adl import losses
from adl.backbone import BackboneConfig
from adl.errors import ConfigError, ShapeError
from adl.model import StudentModel, TeacherModel

CLIP = (8, 16, 16)  # grid (2,4,4) under the default stride stack


def tiny_backbone(channels):
    return BackboneConfig(in_channels=channels, widths=(4, 6, 8))


def make_teacher(mode="prob-atten", seed=0, **kw):
    return TeacherModel(5, mode=mode, backbone=tiny_backbone(2),
                        rng=np.random.default_rng(seed), **kw)


def make_student(mode="prob-atten", seed=0, **kw):
    return StudentModel(5, mode=mode, backbone=tiny_backbone(3),
                        rng=np.random.default_rng(seed), **kw)


def flow_clip(rng, n=None):
    shape = CLIP + (2,) if n is None else (n,) + CLIP + (2,)
    return ad.Tensor(rng.normal(size=shape).astype(np.float32))


def rgb_clip(rng, n=None):
    shape = CLIP + (3,) if n is None else (n,) + CLIP + (3,)
    return ad.Tensor(rng.random(shape).astype(np.float32))


class TestTeacher:
    def test_forward_shapes(self):
        model = make_teacher()
        out = model.forward(flow_clip(np.random.default_rng(1)))
        assert out.dist.values.shape == (5,)
        assert out.attention.shape == (2, 4, 4)
        assert out.attn_feats.shape == (2, 4, 4, 6)

    def test_eval_forward_deterministic(self):
        model = make_teacher()
        x = flow_clip(np.random.default_rng(1))
        a = model.forward(x).dist.values.data
        b = model.forward(x).dist.values.data
        assert np.array_equal(a, b)

    def test_prob_training_samples_vary(self):
        model = make_teacher()
        x = flow_clip(np.random.default_rng(1))
        a = model.forward(x, training=True, rng=np.random.default_rng(2))
        b = model.forward(x, training=True, rng=np.random.default_rng(3))
        assert not np.array_equal(a.attention.data, b.attention.data)

    def test_soft_mode_map_ignores_rng(self):
        model = make_teacher(mode="soft-atten")
        x = flow_clip(np.random.default_rng(1))
        a = model.forward(x, training=True, rng=np.random.default_rng(8))
        b = model.forward(x, training=True, rng=np.random.default_rng(9))
        assert np.allclose(a.attention.data, b.attention.data)

    def test_reference_map_matches_expected_path(self):
        model = make_teacher()
        x = flow_clip(np.random.default_rng(4))
        ref = model.reference_attention(x)
        out = model.forward(x)  # eval prob-atten uses the expected map
        assert ref.kind == "reference"
        assert np.allclose(ref.data, out.attention.data)
        assert not ref.values.requires_grad

    def test_reference_map_sampled_variant(self):
        model = make_teacher()
        x = flow_clip(np.random.default_rng(4))
        a = model.reference_attention(x, sampled=True, rng=np.random.default_rng(0))
        b = model.reference_attention(x, sampled=True, rng=np.random.default_rng(0))
        c = model.reference_attention(x, sampled=True, rng=np.random.default_rng(1))
        assert np.array_equal(a.data, b.data)
        assert not np.array_equal(a.data, c.data)

    def test_parameter_census(self):
        model = make_teacher()
        names = sorted(model.parameters())
        assert names == [
            "attn.weight",
            "backbone.block1.bn_scale", "backbone.block1.bn_shift", "backbone.block1.weight",
            "backbone.block2.bn_scale", "backbone.block2.bn_shift", "backbone.block2.weight",
            "backbone.block3.bn_scale", "backbone.block3.bn_shift", "backbone.block3.weight",
            "cls.weight",
        ]

    def test_gradients_reach_every_parameter(self):
        model = make_teacher()
        x = flow_clip(np.random.default_rng(5), n=2)
        with ad.Tape() as tape:
            out = model.forward(x, training=True, rng=np.random.default_rng(6))
            loss = losses.cross_entropy(out.dist, np.array([1, 3]))
        ad.backward(loss, tape)
        for name, p in model.parameters().items():
            assert p.grad is not None and np.any(p.grad != 0), name

    def test_wrong_channel_backbone_rejected(self):
        with pytest.raises(ConfigError):
            TeacherModel(5, backbone=tiny_backbone(3), rng=np.random.default_rng(0))

    def test_unknown_mode_rejected(self):
        with pytest.raises(ConfigError):
            make_teacher(mode="hard-atten")


class TestStudent:
    def test_forward_shapes_and_mix(self):
        model = make_student()
        out = model.forward(rgb_clip(np.random.default_rng(1)))
        assert out.dist.values.shape == (5,)
        mix = 0.5 * (out.dist_motion.values.data + out.dist_appearance.values.data)
        assert np.allclose(out.dist.values.data, mix, atol=1e-7)

    def test_heads_differ_from_init(self):
        model = make_student()
        out = model.forward(rgb_clip(np.random.default_rng(2)))
        assert not np.array_equal(out.attn_motion.data, out.attn_appearance.data)

    def test_motion_override_is_used(self):
        model = make_student()
        x = rgb_clip(np.random.default_rng(3))
        grid = model.grid_shape(CLIP + (3,))
        delta = np.zeros(grid, dtype=np.float32)
        delta[:, 0, 0] = 1.0
        out = model.forward(x, motion_override=ad.constant(delta))
        assert np.array_equal(out.attn_motion.data, delta)
        free = model.forward(x)
        assert not np.allclose(out.dist_motion.values.data,
                               free.dist_motion.values.data)
        # appearance head unaffected by the override
        assert np.allclose(out.dist_appearance.values.data,
                           free.dist_appearance.values.data)

    def test_override_shape_checked(self):
        model = make_student()
        x = rgb_clip(np.random.default_rng(3))
        with pytest.raises(ShapeError):
            model.forward(x, motion_override=ad.constant(np.ones((3, 3, 3), np.float32)))

    def test_parameter_census(self):
        model = make_student()
        names = sorted(model.parameters())
        assert "attn_m.weight" in names and "attn_a.weight" in names
        assert "cls_m.weight" in names and "cls_a.weight" in names
        assert len(names) == 13

    def test_full_objective_grads(self):
        model = make_student(mode="soft-atten")
        x = rgb_clip(np.random.default_rng(7), n=2)
        grid = (2,) + model.grid_shape(CLIP + (3,))
        teacher_map = np.random.default_rng(8).dirichlet(
            np.ones(16), size=(2, 2)).reshape(grid).astype(np.float32)
        with ad.Tape() as tape:
            out = model.forward(x, training=True, rng=np.random.default_rng(9))
            total, parts = losses.total_loss(out.dist, np.array([0, 4]),
                                             out.attn_motion, teacher_map,
                                             out.attn_appearance, grid[1:])
        ad.backward(total, tape)
        for name, p in model.parameters().items():
            assert p.grad is not None, name
        assert parts.total == pytest.approx(
            parts.ce + parts.lambda_distill * parts.kl_distill
            + parts.lambda_uniform * parts.kl_uniform, abs=1e-5)

    def test_batched_matches_per_sample(self):
        model = make_student(mode="soft-atten")
        rng = np.random.default_rng(11)
        batch = rgb_clip(rng, n=3)
        full = model.forward(batch).dist.values.data
        for i in range(3):
            single = model.forward(ad.Tensor(batch.data[i])).dist.values.data
            assert np.allclose(full[i], single, atol=1e-5)


class TestState:
    @pytest.mark.parametrize("make", [make_teacher, make_student])
    def test_round_trip_bit_exact(self, make):
        model = make(seed=1)
        snap = {k: v.copy() for k, v in model.state().items()}
        for p in model.parameters().values():
            p.data += 1.0
        model.load_state(snap)
        for k, v in model.state().items():
            assert np.array_equal(v, snap[k]), k

    def test_state_covers_buffers(self):
        model = make_teacher()
        assert "backbone.block1.bn_mean" in model.state()

    def test_load_rejects_missing_key(self):
        model = make_teacher()
        snap = model.state()
        snap.pop("cls.weight")
        with pytest.raises(ConfigError):
            model.load_state(snap)

    def test_load_rejects_bad_shape(self):
        model = make_teacher()
        snap = model.state()
        snap["cls.weight"] = np.zeros((2, 2), np.float32)
        with pytest.raises(ShapeError):
            model.load_state(snap)

    def test_same_seed_same_init(self):
        a = make_student(seed=3).state()
        b = make_student(seed=3).state()
        for k in a:
            assert np.array_equal(a[k], b[k]), k
