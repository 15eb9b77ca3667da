"""Teacher and student networks assembled from the backbone and heads.

The teacher looks at flow clips through a single attention head; students
look at colour clips through two heads (motion and appearance) and average
the two class distributions. Parameters live in flat name->Tensor maps so
optimizers and checkpoints can treat every model uniformly.
"""

import numpy as np

from . import attention as attn
from . import autodiff as ad
from . import recognition as rec
from .backbone import BackboneConfig, forward_features, init_backbone
from .errors import ConfigError, ShapeError

ATTENTION_MODES = ("soft-atten", "soft-res", "prob-atten")


def _check_mode(mode):
    if mode not in ATTENTION_MODES:
        raise ConfigError(f"unknown attention mode {mode!r}; expected one of {ATTENTION_MODES}")


def _head_map(attn_feats, params, mode, temperature, training, rng):
    """Return (pooling map, head distribution) for one attention head.

    Under prob-atten training the pooling map is a Gumbel sample while the
    distribution is the deterministic expected map from the same logits, so
    regularizers see the distribution rather than one noisy draw.  In every
    other case both are the same object.
    """
    if mode == "prob-atten":
        expected = attn.prob_attention_expected(attn_feats, params)
        if training:
            sample = attn.prob_attention_sample(attn_feats, params, temperature, rng)
            return sample, expected
        return expected, expected
    soft = attn.soft_attention(attn_feats, params)
    return soft, soft


class TeacherOutput:
    __slots__ = ("dist", "attention", "attention_dist", "attn_feats")

    def __init__(self, dist, attention, attention_dist, attn_feats):
        self.dist = dist
        self.attention = attention
        self.attention_dist = attention_dist
        self.attn_feats = attn_feats


class StudentOutput:
    __slots__ = ("dist", "dist_motion", "dist_appearance",
                 "attn_motion", "attn_appearance",
                 "attn_motion_dist", "attn_appearance_dist", "attn_feats")

    def __init__(self, dist, dist_motion, dist_appearance,
                 attn_motion, attn_appearance,
                 attn_motion_dist, attn_appearance_dist, attn_feats):
        self.dist = dist
        self.dist_motion = dist_motion
        self.dist_appearance = dist_appearance
        self.attn_motion = attn_motion
        self.attn_appearance = attn_appearance
        self.attn_motion_dist = attn_motion_dist
        self.attn_appearance_dist = attn_appearance_dist
        self.attn_feats = attn_feats


class _BaseModel:
    """Shared parameter bookkeeping for both network variants."""

    def parameters(self):
        return dict(self._params)

    def state(self):
        """Flat name -> array snapshot of parameters plus running buffers."""
        out = {}
        for name in sorted(self._params):
            out[name] = self._params[name].data
        for name in sorted(self._buffers):
            out[name] = self._buffers[name]
        return out

    def load_state(self, state):
        expected = set(self._params) | set(self._buffers)
        got = set(state)
        if expected != got:
            missing = sorted(expected - got)
            extra = sorted(got - expected)
            raise ConfigError(f"state mismatch: missing {missing}, unexpected {extra}")
        for name, tensor in self._params.items():
            arr = np.asarray(state[name], dtype=tensor.data.dtype)
            if arr.shape != tensor.data.shape:
                raise ShapeError(f"{name}: stored shape {arr.shape} != model shape {tensor.data.shape}")
            tensor.data[...] = arr
            tensor.grad = None
        for name in self._buffers:
            arr = np.asarray(state[name], dtype=self._buffers[name].dtype)
            if arr.shape != self._buffers[name].shape:
                raise ShapeError(f"{name}: stored shape {arr.shape} != buffer shape {self._buffers[name].shape}")
            self._buffers[name][...] = arr

    def grid_shape(self, clip_shape):
        return self.backbone.grid_shape(clip_shape)

    def _backbone_taps(self, clip, training):
        bb_params = {k[len("backbone."):]: v for k, v in self._params.items()
                     if k.startswith("backbone.")}
        bb_buffers = {k[len("backbone."):]: v for k, v in self._buffers.items()}
        return forward_features(clip, bb_params, self.backbone, training, bb_buffers)


class TeacherModel(_BaseModel):
    """Flow-input recognizer whose attention map doubles as a supervision target."""

    in_channels = 2

    def __init__(self, num_classes, mode="prob-atten", backbone=None,
                 temperature=1.0, dropout=0.7, literal_pool=False, rng=None,
                 dtype=np.float32):
        _check_mode(mode)
        if rng is None:
            rng = np.random.default_rng(0)
        self.num_classes = num_classes
        self.mode = mode
        self.temperature = temperature
        self.dropout = dropout
        self.literal_pool = literal_pool
        self.backbone = backbone or BackboneConfig(in_channels=self.in_channels)
        if self.backbone.in_channels != self.in_channels:
            raise ConfigError("teacher backbone must take 2-channel flow input")

        bb_params, bb_buffers = init_backbone(self.backbone, rng, dtype=dtype)
        self._params = {f"backbone.{k}": v for k, v in bb_params.items()}
        self._buffers = {f"backbone.{k}": v for k, v in bb_buffers.items()}
        self.attn = attn.init_attention(self.backbone.attn_channels, rng, dtype=dtype)
        self.classifier = rec.init_classifier(self.backbone.feat_channels,
                                              num_classes, rng, dtype=dtype)
        self._params["attn.weight"] = self.attn.weight
        self._params["cls.weight"] = self.classifier.weight

    def forward(self, flow_clip, training=False, rng=None):
        taps = self._backbone_taps(flow_clip, training)
        amap, adist = _head_map(taps.attn_feats, self.attn, self.mode,
                                self.temperature, training, rng)
        dist = rec.pool_classify(taps.class_feats, amap, self.classifier,
                                 residual=self.mode == "soft-res",
                                 literal_pool=self.literal_pool,
                                 literal_residual=self.literal_pool,
                                 dropout_rate=self.dropout,
                                 training=training, rng=rng)
        return TeacherOutput(dist, amap, adist, taps.attn_feats)

    def reference_attention(self, flow_clip, sampled=False, rng=None):
        """Frozen supervision map for a batch of flow clips.

        Deterministic expected map by default; set sampled=True to draw one
        stochastic map instead. Never records gradients.
        """
        taps = self._backbone_taps(flow_clip, training=False)
        if sampled:
            amap = attn.prob_attention_sample(taps.attn_feats, self.attn,
                                              self.temperature, rng)
        else:
            amap = attn.prob_attention_expected(taps.attn_feats, self.attn)
        return attn.reference_map(amap.values)

    def attention_features(self, flow_clip):
        """Frozen mid-stack feature tap for similarity-matching objectives."""
        taps = self._backbone_taps(flow_clip, training=False)
        return ad.constant(taps.attn_feats.data.copy())


class StudentModel(_BaseModel):
    """Colour-input recognizer with motion and appearance attention heads."""

    in_channels = 3

    def __init__(self, num_classes, mode="prob-atten", backbone=None,
                 temperature=1.0, dropout=0.7, literal_pool=False, rng=None,
                 dtype=np.float32):
        _check_mode(mode)
        if rng is None:
            rng = np.random.default_rng(0)
        self.num_classes = num_classes
        self.mode = mode
        self.temperature = temperature
        self.dropout = dropout
        self.literal_pool = literal_pool
        self.backbone = backbone or BackboneConfig(in_channels=self.in_channels)
        if self.backbone.in_channels != self.in_channels:
            raise ConfigError("student backbone must take 3-channel colour input")

        bb_params, bb_buffers = init_backbone(self.backbone, rng, dtype=dtype)
        self._params = {f"backbone.{k}": v for k, v in bb_params.items()}
        self._buffers = {f"backbone.{k}": v for k, v in bb_buffers.items()}
        c_attn = self.backbone.attn_channels
        c_feat = self.backbone.feat_channels
        self.attn_motion = attn.init_attention(c_attn, rng, dtype=dtype)
        self.attn_appearance = attn.init_attention(c_attn, rng, dtype=dtype)
        self.cls_motion = rec.init_classifier(c_feat, num_classes, rng, dtype=dtype)
        self.cls_appearance = rec.init_classifier(c_feat, num_classes, rng, dtype=dtype)
        self._params["attn_m.weight"] = self.attn_motion.weight
        self._params["attn_a.weight"] = self.attn_appearance.weight
        self._params["cls_m.weight"] = self.cls_motion.weight
        self._params["cls_a.weight"] = self.cls_appearance.weight

    def forward(self, rgb_clip, training=False, rng=None, motion_override=None):
        """Run both heads; motion_override substitutes an external motion map."""
        taps = self._backbone_taps(rgb_clip, training)
        if motion_override is not None:
            expect = taps.attn_feats.shape[:-1]
            got = motion_override.shape
            if tuple(got) != tuple(expect):
                raise ShapeError(f"override map shape {tuple(got)} != grid {tuple(expect)}")
            motion_map = motion_dist = motion_override
        else:
            motion_map, motion_dist = _head_map(taps.attn_feats, self.attn_motion,
                                                self.mode, self.temperature,
                                                training, rng)
        appearance_map, appearance_dist = _head_map(
            taps.attn_feats, self.attn_appearance, self.mode,
            self.temperature, training, rng)
        residual = self.mode == "soft-res"
        dist_m = rec.pool_classify(taps.class_feats, motion_map, self.cls_motion,
                                   residual=residual,
                                   literal_pool=self.literal_pool,
                                   literal_residual=self.literal_pool,
                                   dropout_rate=self.dropout,
                                   training=training, rng=rng)
        dist_a = rec.pool_classify(taps.class_feats, appearance_map, self.cls_appearance,
                                   residual=residual,
                                   literal_pool=self.literal_pool,
                                   literal_residual=self.literal_pool,
                                   dropout_rate=self.dropout,
                                   training=training, rng=rng)
        mixed = ad.mul(ad.add(dist_m.values, dist_a.values), 0.5)
        dist = rec.ClassDistribution(mixed)
        return StudentOutput(dist, dist_m, dist_a, motion_map, appearance_map,
                             motion_dist, appearance_dist, taps.attn_feats)
