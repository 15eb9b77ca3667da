"""Training orchestration for the flow teacher and the colour students.

One RunConfig drives every role. The teacher trains first and is frozen;
student roles consume its checkpoint for reference attention maps or
feature targets. All stochastic draws come from named streams derived from
the single run seed, so single-threaded runs are bit-reproducible.
"""

import os
from dataclasses import dataclass, fields, replace

import numpy as np

from . import attention as attn
from . import autodiff as ad
from . import losses
from .backbone import BackboneConfig
from .checkpoint import Checkpoint
from .config import stream_rng
from .errors import ConfigError, InputError
from .model import ATTENTION_MODES, StudentModel, TeacherModel
from .optim import SgdMomentum

ROLES = ("teacher-flow", "student-rgb-baseline", "student-rgb-distill",
         "student-rgb-featmatch", "student-rgb-oracle-attn")
STUDENT_ROLES = ROLES[1:]
TEACHER_FED_ROLES = ("student-rgb-distill", "student-rgb-featmatch",
                     "student-rgb-oracle-attn")

_REJECTED_MODES = ("prob-res", "prob+res", "prob-atten-res")


@dataclass
class RunConfig:
    role: str
    mode: str = "prob-atten"
    epochs: int = 30
    batch_size: int = 8
    lr: float = 0.01
    lr_decay: float = 10.0
    plateau_patience: int = 3
    plateau_threshold: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 4e-5
    dropout: float = 0.7
    temperature: float = 2.0
    lambda_distill: float = None
    lambda_uniform: float = None
    featmatch_weight: float = 1000.0
    seed: int = 0
    literal_eq4: bool = False
    sampled_targets: bool = False
    flip_prob: float = 0.0
    num_classes: int = 16
    widths: tuple = (16, 32, 64)

    def __post_init__(self):
        if self.mode in _REJECTED_MODES:
            raise ConfigError("the sampling head cannot carry the residual "
                              "stream; pick soft-res or prob-atten")
        if self.role not in ROLES:
            raise ConfigError(f"unknown role {self.role!r}; expected one of {ROLES}")
        if self.mode not in ATTENTION_MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {ATTENTION_MODES}")
        if self.role == "teacher-flow" and self.lambda_distill is not None:
            raise ConfigError("the teacher has no reference head to mimic; "
                              "lambda_distill is a student knob")
        if self.epochs < 0:
            raise ConfigError("epochs must be nonnegative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if self.lr <= 0 or self.lr_decay <= 1:
            raise ConfigError("lr must be positive and lr_decay > 1")
        if self.plateau_patience < 1 or self.plateau_threshold < 0:
            raise ConfigError("plateau_patience >= 1 and plateau_threshold >= 0 required")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be nonnegative")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if self.featmatch_weight < 0:
            raise ConfigError("featmatch_weight must be nonnegative")
        if not 0 <= self.flip_prob <= 1:
            raise ConfigError("flip_prob must lie in [0, 1]")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be at least 2")
        self.widths = tuple(int(w) for w in self.widths)

    def to_flat(self):
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if v is None:
                out[f.name] = "none"
            elif isinstance(v, bool):
                out[f.name] = "true" if v else "false"
            elif isinstance(v, tuple):
                out[f.name] = ",".join(str(x) for x in v)
            elif isinstance(v, float):
                out[f.name] = repr(v)
            else:
                out[f.name] = str(v)
        return out

    @classmethod
    def from_flat(cls, entries):
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(entries) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        if "role" not in entries:
            raise ConfigError("config must name a role")
        kwargs = {}
        for name, raw in entries.items():
            kwargs[name] = _parse_field(name, raw)
        return cls(**kwargs)


_INT_FIELDS = {"epochs", "batch_size", "plateau_patience", "seed", "num_classes"}
_FLOAT_FIELDS = {"lr", "lr_decay", "plateau_threshold", "momentum", "weight_decay",
                 "dropout", "temperature", "featmatch_weight", "flip_prob"}
_OPT_FLOAT_FIELDS = {"lambda_distill", "lambda_uniform"}
_BOOL_FIELDS = {"literal_eq4", "sampled_targets"}


def _parse_field(name, raw):
    try:
        if name in _INT_FIELDS:
            return int(raw)
        if name in _FLOAT_FIELDS:
            return float(raw)
        if name in _OPT_FLOAT_FIELDS:
            return None if raw == "none" else float(raw)
        if name in _BOOL_FIELDS:
            if raw not in ("true", "false"):
                raise ValueError(raw)
            return raw == "true"
        if name == "widths":
            return tuple(int(x) for x in raw.split(","))
    except ValueError as exc:
        raise ConfigError(f"bad value for config key {name}: {raw!r}") from exc
    return raw


# ------------------------------------------------------------------ models

def build_model(config, rng=None):
    """Fresh model for the config's role, seeded from the run's init stream."""
    if rng is None:
        rng = stream_rng(config.seed, "init")
    kind = TeacherModel if config.role == "teacher-flow" else StudentModel
    backbone = BackboneConfig(in_channels=kind.in_channels, widths=config.widths)
    return kind(config.num_classes, mode=config.mode, backbone=backbone,
                temperature=config.temperature, dropout=config.dropout,
                literal_pool=config.literal_eq4, rng=rng)


def model_from_checkpoint(ckpt):
    """Rebuild the trained model a checkpoint describes; returns (model, config)."""
    config = RunConfig.from_flat(ckpt.config)
    model = build_model(config)
    model.load_state(ckpt.arrays)
    return model, config


def _teacher_from(teacher):
    if teacher is None:
        raise ConfigError("this role trains against a teacher; pass its checkpoint")
    model, tconf = model_from_checkpoint(teacher)
    if tconf.role != "teacher-flow":
        raise ConfigError(f"teacher checkpoint has role {tconf.role!r}")
    return model


# ------------------------------------------------------------------ batches

def _flip_batch(rgb, flow, rng, flip_prob):
    """Horizontal flip of sampled clips; the x flow component negates."""
    if flip_prob == 0:
        return rgb, flow
    pick = rng.random(len(rgb)) < flip_prob
    if not pick.any():
        return rgb, flow
    rgb = rgb.copy()
    rgb[pick] = rgb[pick, :, :, ::-1]
    if flow is not None:
        flow = flow.copy()
        flipped = flow[pick, :, :, ::-1]
        flipped[..., 0] = -flipped[..., 0]
        flow[pick] = flipped
    return rgb, flow


def _chunks(order, batch_size):
    for start in range(0, len(order), batch_size):
        yield order[start:start + batch_size]


def _accuracy(model, dataset, batch_size=16, teacher=None, sampled=False):
    """Plain eval-mode accuracy used for training telemetry and metrics."""
    hits = 0
    flow_input = isinstance(model, TeacherModel)
    for start in range(0, len(dataset), batch_size):
        sl = slice(start, start + batch_size)
        clips = dataset.flow[sl] if flow_input else dataset.rgb[sl]
        override = None
        if teacher is not None:
            override = teacher.reference_attention(ad.Tensor(dataset.flow[sl])).values
        if flow_input:
            out = model.forward(ad.Tensor(clips))
        else:
            out = model.forward(ad.Tensor(clips), motion_override=override)
        hits += int(np.sum(np.argmax(out.dist.values.data, axis=-1)
                           == dataset.labels[sl]))
    return hits / len(dataset)


# ------------------------------------------------------------------ loop

class _Log:
    def __init__(self, path):
        self.path = path
        if path:
            os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
            self.fh = open(path, "a")
        else:
            self.fh = None

    def line(self, text):
        if self.fh:
            self.fh.write(text + "\n")

    def close(self):
        if self.fh:
            self.fh.close()


def _run_loop(model, config, n_samples, step_fn, log, params=None):
    """Shared epoch loop: shuffling, optimizer, plateau decay, logging.

    step_fn(indices, model_rng, augment_rng) runs forward+backward for one
    batch and returns (LossBreakdown, batch_hits, batch_size).
    """
    opt = SgdMomentum(params if params is not None else model.parameters(),
                      lr=config.lr, momentum=config.momentum,
                      weight_decay=config.weight_decay)
    shuffle_rng = stream_rng(config.seed, "shuffle")
    model_rng = stream_rng(config.seed, "model")
    augment_rng = stream_rng(config.seed, "augment")
    best = np.inf
    stale = 0
    mean_total = float("nan")
    accuracy = float("nan")
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(n_samples)
        totals, hits = [], 0
        for step, idx in enumerate(_chunks(order, config.batch_size)):
            opt.zero_grad()
            parts, batch_hits, _ = step_fn(idx, model_rng, augment_rng)
            opt.step()
            totals.append(parts.total)
            hits += batch_hits
            log.line(f"{epoch} {step} {parts.ce:.6g} {parts.kl_distill:.6g} "
                     f"{parts.kl_uniform:.6g} {parts.total:.6g} {opt.lr:.6g}")
        mean_total = float(np.mean(totals))
        accuracy = hits / n_samples
        improved = mean_total < best * (1.0 - config.plateau_threshold)
        if improved:
            best = mean_total
            stale = 0
        else:
            stale += 1
        log.line(f"# epoch {epoch} mean_total {mean_total:.6g} "
                 f"accuracy {accuracy:.4f} lr {opt.lr:.6g}")
        if stale >= config.plateau_patience:
            opt.lr /= config.lr_decay
            stale = 0
            log.line(f"# epoch {epoch} plateau, lr decayed to {opt.lr:.6g}")
    return mean_total, opt.lr


def _finish(model, config, train_set, mean_total, final_lr, teacher=None):
    override_teacher = teacher if config.role == "student-rgb-oracle-attn" else None
    metrics = {"final_loss": mean_total, "final_lr": final_lr,
               "train_accuracy": _accuracy(model, train_set, teacher=override_teacher)}
    return Checkpoint(arrays=model.state(), config=config.to_flat(),
                      epoch=config.epochs, metrics=metrics)


def _resolved_lambdas(config, grid_shape):
    base = losses.default_lambda(grid_shape)
    lam_d = base if config.lambda_distill is None else config.lambda_distill
    lam_u = base if config.lambda_uniform is None else config.lambda_uniform
    return lam_d, lam_u


def _weighted(ce, terms):
    """ce plus sum of weight*term tensors, skipping zero weights."""
    total = ce
    for weight, term in terms:
        if weight != 0:
            total = ad.add(total, ad.mul(term, weight))
    return total


def train_teacher(train_set, config, log_path=None):
    """Train the flow-input teacher; returns its checkpoint."""
    if config.role != "teacher-flow":
        raise ConfigError(f"train_teacher needs role teacher-flow, got {config.role!r}")
    if train_set.flow.shape[-1] != 2:
        raise InputError("teacher training needs two-channel flow clips")
    config = replace(config, num_classes=int(train_set.labels.max()) + 1)
    model = build_model(config)
    grid = model.grid_shape(train_set.flow.shape[1:])
    _, lam_u = _resolved_lambdas(config, grid)
    uniform = attn.uniform_map(grid)

    def step(idx, model_rng, augment_rng):
        flow = train_set.flow[idx]
        _, flow = _flip_batch(train_set.rgb[idx], flow, augment_rng, config.flip_prob)
        labels = train_set.labels[idx]
        with ad.Tape() as tape:
            out = model.forward(ad.Tensor(flow), training=True, rng=model_rng)
            ce = losses.cross_entropy(out.dist, labels)
            if config.mode == "prob-atten":
                klu = losses.kl_per_slice(out.attention_dist,
                                          _batch_uniform(uniform, len(idx)))
            else:
                klu = ad.constant(np.zeros((), np.float32))
            total = _weighted(ce, [(lam_u, klu)])
            ad.backward(total, tape)
        hits = int(np.sum(np.argmax(out.dist.values.data, axis=-1) == labels))
        parts = losses.LossBreakdown(total=total.item(), ce=ce.item(),
                                     kl_distill=0.0, kl_uniform=klu.item(),
                                     lambda_distill=0.0, lambda_uniform=lam_u)
        return parts, hits, len(idx)

    log = _Log(log_path)
    try:
        mean_total, final_lr = _run_loop(model, config, len(train_set), step, log)
    finally:
        log.close()
    return _finish(model, config, train_set, mean_total, final_lr)


def _batch_uniform(uniform, n):
    data = uniform.values.data
    return attn.AttentionMap(ad.constant(np.broadcast_to(data, (n,) + data.shape).copy()),
                             "reference", validate=False)


def train_student(train_set, config, teacher=None, log_path=None):
    """Train a colour student of any role; returns its checkpoint.

    Roles that learn from the teacher receive its frozen checkpoint; its
    signals are computed outside the gradient tape every batch.
    """
    if config.role not in STUDENT_ROLES:
        raise ConfigError(f"train_student cannot run role {config.role!r}")
    if train_set.rgb.shape[-1] != 3:
        raise InputError("student training needs three-channel colour clips")
    config = replace(config, num_classes=int(train_set.labels.max()) + 1)
    needs_teacher = config.role in TEACHER_FED_ROLES
    teacher_model = _teacher_from(teacher) if needs_teacher else None
    if needs_teacher and train_set.flow.shape[-1] != 2:
        raise InputError("this role needs flow clips for the teacher at train time")

    model = build_model(config)
    grid = model.grid_shape(train_set.rgb.shape[1:])
    lam_d, lam_u = _resolved_lambdas(config, grid)
    uniform = attn.uniform_map(grid)
    target_rng = stream_rng(config.seed, "targets") if config.sampled_targets else None
    role = config.role

    def step(idx, model_rng, augment_rng):
        rgb = train_set.rgb[idx]
        flow = train_set.flow[idx] if needs_teacher else None
        rgb, flow = _flip_batch(rgb, flow, augment_rng, config.flip_prob)
        labels = train_set.labels[idx]

        ref_map = teacher_feats = None
        if role in ("student-rgb-distill", "student-rgb-oracle-attn"):
            ref_map = teacher_model.reference_attention(
                ad.Tensor(flow), sampled=config.sampled_targets, rng=target_rng)
        elif role == "student-rgb-featmatch":
            teacher_feats = teacher_model.attention_features(ad.Tensor(flow))

        uni = _batch_uniform(uniform, len(idx))
        with ad.Tape() as tape:
            override = ref_map.values if role == "student-rgb-oracle-attn" else None
            out = model.forward(ad.Tensor(rgb), training=True, rng=model_rng,
                                motion_override=override)
            ce = losses.cross_entropy(out.dist, labels)
            zero = ad.constant(np.zeros((), np.float32))
            if role == "student-rgb-distill":
                kld = losses.kl_per_slice(out.attn_motion_dist, ref_map)
                klu = losses.kl_per_slice(out.attn_appearance_dist, uni)
                l_d, l_u = lam_d, lam_u
            elif role == "student-rgb-baseline":
                kld = zero
                klu = ad.add(losses.kl_per_slice(out.attn_motion_dist, uni),
                             losses.kl_per_slice(out.attn_appearance_dist, uni))
                l_d, l_u = 0.0, lam_u
            elif role == "student-rgb-oracle-attn":
                kld = zero
                klu = losses.kl_per_slice(out.attn_appearance_dist, uni)
                l_d, l_u = 0.0, lam_u
            else:  # featmatch: the matching distance replaces both KL terms
                kld = losses.featmatch_loss(out.attn_feats, teacher_feats)
                klu = zero
                l_d, l_u = config.featmatch_weight, 0.0
            total = _weighted(ce, [(l_d, kld), (l_u, klu)])
            ad.backward(total, tape)
        hits = int(np.sum(np.argmax(out.dist.values.data, axis=-1) == labels))
        parts = losses.LossBreakdown(total=total.item(), ce=ce.item(),
                                     kl_distill=kld.item(), kl_uniform=klu.item(),
                                     lambda_distill=l_d, lambda_uniform=l_u)
        return parts, hits, len(idx)

    params = model.parameters()
    if role == "student-rgb-oracle-attn":
        del params["attn_m.weight"]  # bypassed head never receives gradient
    log = _Log(log_path)
    try:
        mean_total, final_lr = _run_loop(model, config, len(train_set), step, log,
                                         params=params)
    finally:
        log.close()
    return _finish(model, config, train_set, mean_total, final_lr,
                   teacher=teacher_model)
