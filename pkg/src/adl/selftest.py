"""Fast invariant battery behind the `adl selftest` command.

Each check exercises one module contract end to end in well under a
second; the full battery is a smoke screen for a broken install, not a
substitute for the test suite.
"""

import os
import tempfile

import numpy as np

from . import autodiff as ad
from . import attention as at
from . import datagen as dg
from . import losses, ops, optim, recognition
from .backbone import BackboneConfig
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import digest, format_flat, parse_flat, stream_rng
from .dataio import read_dataset, write_dataset
from .evaluation import (bilinear_resize, center_prior_baseline,
                         localization_pr)
from .harness import RunConfig, train_teacher
from .model import StudentModel, TeacherModel


def _fd_gradient(build, x0, eps=1e-6):
    """Scalar-input central difference for the loss built by `build`."""
    return (build(x0 + eps) - build(x0 - eps)) / (2 * eps)


def check_autodiff_gradient():
    def value(v):
        x = ad.Tensor(np.array([v, 2.0 * v], dtype=np.float64))
        y = ad.tsum(ad.mul(ad.exp(ad.mul(x, 0.3)), x))
        return float(y.data)

    x = ad.Tensor(np.array([0.7, 1.4], dtype=np.float64), requires_grad=True)
    with ad.Tape() as tape:
        y = ad.tsum(ad.mul(ad.exp(ad.mul(x, 0.3)), x))
    ad.backward(y, tape)
    got = float(x.grad[0] + 2.0 * x.grad[1])
    want = _fd_gradient(value, 0.7)
    assert abs(got - want) < 1e-6, f"autodiff grad {got} vs fd {want}"


def check_conv_reference():
    rng = np.random.default_rng(11)
    x = rng.normal(size=(2, 5, 6, 6, 3)).astype(np.float32)
    k = rng.normal(size=(3, 3, 3, 3, 4)).astype(np.float32)
    fast = ops.conv3d(ad.Tensor(x), ad.Tensor(k),
                      stride=(1, 2, 2), padding=(1, 1, 1))
    slow = ops.conv3d_reference(x[0], k, stride=(1, 2, 2), padding=(1, 1, 1))
    err = np.abs(fast.data[0] - slow).max()
    assert err < 1e-4, f"conv mismatch {err}"


def check_softmax_normalization():
    rng = np.random.default_rng(5)
    logits = ad.Tensor(rng.normal(size=(3, 4, 5, 5)).astype(np.float32) * 4)
    probs = ops.softmax_slices(logits)
    sums = probs.data.reshape(3, 4, -1).sum(axis=-1)
    assert np.allclose(sums, 1.0, atol=1e-5), "slice softmax does not normalize"


def check_gumbel_one_hot():
    # low temperature concentrates nearly all sampled mass on one cell
    rng = stream_rng(0, "gumbel")
    logits = ad.Tensor(np.zeros((2, 2, 3, 3), dtype=np.float32))
    noisy = ad.add(logits, ops.gumbel_noise(logits.shape, rng))
    probs = ops.softmax_slices(ad.mul(noisy, 1.0 / 0.01))
    peak = probs.data.reshape(2, 2, -1).max(axis=-1)
    assert peak.min() > 0.9, "cold gumbel-softmax sample is not near one-hot"


def check_uniform_pool_is_mean():
    rng = np.random.default_rng(3)
    feats = ad.Tensor(rng.normal(size=(2, 3, 4, 4, 6)).astype(np.float32))
    uni = ad.Tensor(np.broadcast_to(at.uniform_map((3, 4, 4)).data,
                                    (2, 3, 4, 4)).copy())
    pooled = ops.attn_pool(uni, feats)
    want = feats.data.mean(axis=(1, 2, 3))
    err = np.abs(pooled.data - want).max()
    assert err < 1e-5, f"uniform pooling is not the mean (err {err})"


def check_kl_identities():
    rng = np.random.default_rng(9)
    raw = rng.random((2, 3, 4, 4)).astype(np.float64) + 0.1
    p = raw / raw.sum(axis=(2, 3), keepdims=True)
    zero = losses.kl_per_slice(ad.Tensor(p), ad.Tensor(p.copy()))
    assert abs(float(zero.data)) < 1e-9, "KL(p, p) != 0"
    q = np.roll(p, 1, axis=2)
    pos = losses.kl_per_slice(ad.Tensor(p), ad.Tensor(q))
    assert float(pos.data) > 0, "KL not positive for distinct maps"


def check_default_lambda():
    lam = losses.default_lambda((4, 8, 8))
    assert abs(lam - 1.0 / 256.0) < 1e-12, f"default weight {lam}"


def check_sgd_quadratic():
    w = ad.Tensor(np.array([4.0], dtype=np.float64), requires_grad=True)
    opt = optim.SgdMomentum({"w": w}, lr=0.1, momentum=0.9, weight_decay=0.0)
    for _ in range(220):
        opt.zero_grad()
        with ad.Tape() as tape:
            loss = ad.tsum(ad.mul(w, w))
        ad.backward(loss, tape)
        opt.step()
    assert abs(float(w.data[0])) < 1e-3, "momentum descent failed on x^2"


def check_datagen_consistency():
    config = dg.DatasetConfig(train_per_class=1, test_per_class=1)
    rng = stream_rng(1, "selftest-datagen")
    for label in (0, 7, 15):
        spec = dg.draw_scene_spec(config, label, rng)
        sample = dg.render_clip(spec, config)
        err = dg.warp_consistency_error(sample)
        assert err < 0.35, f"warp consistency {err} for label {label}"
        back = dg.reverse_clip(dg.reverse_clip(sample))
        assert np.array_equal(back.rgb, sample.rgb), "reversal not an involution"
        assert np.allclose(back.flow, sample.flow), "flow reversal not an involution"


def check_dataset_round_trip():
    config = dg.DatasetConfig(train_per_class=1, test_per_class=1)
    train, _ = dg.generate_dataset(config, seed=2)
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "t.advd")
        write_dataset(path, train, split="train", seed=2, config_digest="beef")
        back = read_dataset(path)
    assert np.array_equal(back.rgb, train.rgb), "rgb changed in container"
    assert np.array_equal(back.flow, train.flow), "flow changed in container"
    assert np.array_equal(back.labels, train.labels), "labels changed"
    assert np.array_equal(back.boxes, train.boxes), "boxes changed"


def check_checkpoint_round_trip():
    rng = np.random.default_rng(21)
    arrays = {"a.w": rng.normal(size=(3, 4)).astype(np.float32),
              "b": rng.normal(size=(2,)).astype(np.float32)}
    ckpt = Checkpoint(arrays=arrays, config={"role": "teacher-flow"},
                      epoch=3, metrics={"final_loss": 0.25})
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "c.adck")
        save_checkpoint(ckpt, path)
        back = load_checkpoint(path)
        save_checkpoint(back, path + "2")
        with open(path, "rb") as fh:
            one = fh.read()
        with open(path + "2", "rb") as fh:
            two = fh.read()
    assert one == two, "save-load-save not byte-identical"
    assert np.array_equal(back.arrays["a.w"], arrays["a.w"]), "tensor changed"


def check_model_shapes():
    rng = stream_rng(4, "selftest-model")
    teacher = TeacherModel(4, mode="soft-atten", rng=rng,
                           backbone=BackboneConfig(widths=(4, 6, 8), in_channels=2))
    student = StudentModel(4, mode="soft-atten", rng=rng,
                           backbone=BackboneConfig(widths=(4, 6, 8), in_channels=3))
    flow = ad.Tensor(np.zeros((2, 8, 16, 16, 2), dtype=np.float32))
    rgb = ad.Tensor(np.zeros((2, 8, 16, 16, 3), dtype=np.float32))
    t_out = teacher.forward(flow, training=False)
    s_out = student.forward(rgb, training=False)
    assert t_out.dist.data.shape == (2, 4), "teacher class shape"
    assert t_out.attention.shape == (2, 2, 4, 4), "teacher map shape"
    sums = s_out.attn_motion.data.reshape(2, 2, -1).sum(axis=-1)
    assert np.allclose(sums, 1.0, atol=1e-5), "student map not normalized"


def check_training_step():
    config = dg.DatasetConfig(shapes=("square", "cross"), motions=("drift-right",),
                              train_per_class=2, test_per_class=1)
    train, _ = dg.generate_dataset(config, seed=5)
    run = RunConfig(role="teacher-flow", epochs=1, batch_size=2, widths=(4, 6, 8),
                    seed=6, mode="soft-atten")
    ckpt = train_teacher(train, run)
    loss = ckpt.metrics["final_loss"]
    assert np.isfinite(loss), f"teacher loss {loss}"


def check_localization_toy():
    # map mass exactly inside the only box: best threshold scores perfectly
    maps = np.zeros((1, 2, 8, 8))
    maps[:, :, 2:5, 2:5] = 1.0
    boxes = np.zeros((1, 2, 4))
    boxes[0, :, :] = (8, 8, 20, 20)  # frames are 32x32, box covers grid 2..5
    boxes = np.broadcast_to(boxes[:, :1, :], (1, 16, 4)).copy()
    report = localization_pr(maps, boxes, (32, 32))
    assert report.best.f1 > 0.99, f"toy localization f1 {report.best.f1}"


def check_center_prior():
    prior = center_prior_baseline((4,), resolution=16)
    sums = prior.reshape(4, -1).sum(axis=-1)
    assert np.allclose(sums, 1.0, atol=1e-9), "center prior not normalized"
    assert prior[0, 7, 7] >= prior[0].max() - 1e-12, "prior peak off center"


def check_bilinear_identity():
    rng = np.random.default_rng(13)
    plane = rng.random((9, 9))
    same = bilinear_resize(plane, 9, 9)
    assert np.allclose(same, plane, atol=1e-12), "same-size resize not identity"


def check_config_round_trip():
    entries = {"b": "2", "a": "hello world", "empty": ""}
    text = format_flat(entries)
    assert parse_flat(text) == entries, "flat config round trip"
    assert digest(entries) == digest(dict(reversed(list(entries.items())))), \
        "digest depends on insertion order"


CHECKS = (
    ("autodiff-gradient", check_autodiff_gradient),
    ("conv-reference", check_conv_reference),
    ("softmax-normalization", check_softmax_normalization),
    ("gumbel-one-hot", check_gumbel_one_hot),
    ("uniform-pool-mean", check_uniform_pool_is_mean),
    ("kl-identities", check_kl_identities),
    ("default-lambda", check_default_lambda),
    ("sgd-quadratic", check_sgd_quadratic),
    ("datagen-consistency", check_datagen_consistency),
    ("dataset-round-trip", check_dataset_round_trip),
    ("checkpoint-round-trip", check_checkpoint_round_trip),
    ("model-shapes", check_model_shapes),
    ("training-step", check_training_step),
    ("localization-toy", check_localization_toy),
    ("center-prior", check_center_prior),
    ("bilinear-identity", check_bilinear_identity),
    ("config-round-trip", check_config_round_trip),
)


def run_selftest(emit=print):
    failures = []
    for name, check in CHECKS:
        try:
            check()
        except Exception as exc:
            failures.append((name, exc))
            emit(f"FAIL {name}: {exc}")
        else:
            emit(f"ok {name}")
    emit(f"{len(CHECKS) - len(failures)}/{len(CHECKS)} checks passed")
    return failures
