"""Spatio-temporal attention heads.

An attention map assigns one nonnegative weight per grid cell and normalizes
each time slice to sum to one.  The deterministic path is a per-slice softmax
of a bias-free 1x1x1 convolution of the attention features; the stochastic
path perturbs the same logits with Gumbel noise at a temperature before the
softmax, which makes low-temperature samples approach one-hot draws from the
deterministic map while staying differentiable in the head weight.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import ops
from .autodiff import Tensor
from .errors import ConfigError, NumericError

SLICE_SUM_TOL = 1e-5


@dataclass
class AttentionParams:
    weight: Tensor  # (C,) channel-mixing vector


def init_attention(channels, rng, dtype=np.float32, std=0.01):
    w = rng.normal(0.0, std, size=channels).astype(dtype)
    return AttentionParams(weight=Tensor(w, requires_grad=True))


class AttentionMap:
    """Validated per-slice distribution over grid cells.

    kind records which path produced the map: "soft", "sample", "expected"
    or "reference" (a frozen teacher target).
    """

    def __init__(self, values, kind, validate=True):
        self.values = values
        self.kind = kind
        if validate:
            self._check()

    def _check(self):
        data = self.values.data
        if data.ndim not in (3, 4):
            raise NumericError(f"attention map must be (T,H,W) or (N,T,H,W), got {data.shape}")
        if np.any(data < 0):
            raise NumericError("attention map has negative cells")
        sums = data.sum(axis=(-2, -1))
        worst = np.abs(sums - 1.0).max()
        if worst > SLICE_SUM_TOL:
            raise NumericError(f"attention slices must sum to 1, worst deviation {worst:.3e}")

    @property
    def data(self):
        return self.values.data

    @property
    def shape(self):
        return self.values.shape


def attention_logits(attn_feats, params):
    return ops.pointwise_conv(attn_feats, params.weight)


def soft_attention(attn_feats, params):
    """Deterministic per-slice softmax attention."""
    return AttentionMap(ops.softmax_slices(attention_logits(attn_feats, params)), "soft")


def prob_attention_sample(attn_feats, params, temperature, rng):
    """One Gumbel-softmax draw from the probabilistic attention head."""
    if temperature <= 0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    logits = attention_logits(attn_feats, params)
    noise = ad.constant(ops.gumbel_noise(logits.shape, rng, dtype=logits.data.dtype))
    perturbed = ad.div(ad.add(logits, noise), temperature)
    return AttentionMap(ops.softmax_slices(perturbed), "sample")


def prob_attention_expected(attn_feats, params):
    """Deterministic expectation surrogate used at test time."""
    return AttentionMap(ops.softmax_slices(attention_logits(attn_feats, params)), "expected")


def uniform_map(shape, dtype=np.float32):
    """Constant map with every slice uniform; shape (T,H,W) or (N,T,H,W)."""
    h, w = shape[-2], shape[-1]
    return AttentionMap(ad.constant(np.full(shape, 1.0 / (h * w), dtype=dtype)),
                        "reference")


def reference_map(values):
    """Wrap frozen teacher values (plain array or Tensor) as a target map."""
    arr = values.data if isinstance(values, Tensor) else np.asarray(values)
    return AttentionMap(ad.constant(arr.copy()), "reference")
