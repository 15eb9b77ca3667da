"""Attention pooling and classification heads."""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import ops
from .attention import AttentionMap
from .autodiff import Tensor
from .errors import NumericError


@dataclass
class ClassifierParams:
    weight: Tensor  # (C, K) pooled-feature to class-score matrix


def init_classifier(channels, classes, rng, dtype=np.float32, std=0.01):
    w = rng.normal(0.0, std, size=(channels, classes)).astype(dtype)
    return ClassifierParams(weight=Tensor(w, requires_grad=True))


class ClassDistribution:
    """Probability vector(s) over classes; rows sum to 1."""

    def __init__(self, values, validate=True):
        self.values = values
        if validate:
            data = values.data
            if np.any(data < 0) or np.abs(data.sum(axis=-1) - 1.0).max() > 1e-4:
                raise NumericError("class distribution rows must be nonnegative and sum to 1")

    @property
    def data(self):
        return self.values.data

    def argmax(self):
        return np.argmax(self.data, axis=-1)


def _map_values(attn):
    return attn.values if isinstance(attn, AttentionMap) else attn


def tilted_multiply(attn, class_feats, literal=False):
    """Collapse the feature grid under an attention map.

    Sums attn * feats over every grid cell and divides by the number of time
    slices, so a per-slice-normalized map yields an average of per-slice
    attended features.  literal=True drops that normalization and returns the
    raw sum.
    """
    return ops.attn_pool(_map_values(attn), class_feats, normalize=not literal)


def residual_increment(shape, literal=False, dtype=np.float32):
    """Identity map added in residual pooling.

    Default scales each slice to sum to one (every cell 1/(H*W)), making the
    residual term an average pool of the same magnitude as the attended term;
    literal=True uses an all-ones map instead.
    """
    h, w = shape[-2], shape[-1]
    fill = 1.0 if literal else 1.0 / (h * w)
    return ad.constant(np.full(shape, fill, dtype=dtype))


def pool_classify(class_feats, attn, classifier, residual=False,
                  literal_pool=False, literal_residual=False,
                  dropout_rate=0.0, training=False, rng=None):
    """Attention-pool the features and classify; returns ClassDistribution.

    Dropout hits the attention map itself, before the residual term and the
    pooling, so a surviving cell contributes its full feature vector.
    """
    values = _map_values(attn)
    values = ops.dropout(values, dropout_rate, rng=rng, training=training)
    if residual:
        inc = residual_increment(values.shape, literal=literal_residual,
                                 dtype=values.data.dtype)
        values = ad.add(values, inc)
    pooled = ops.attn_pool(values, class_feats, normalize=not literal_pool)
    logits = _apply_classifier(pooled, classifier)
    return ClassDistribution(ops.softmax_classes(logits))


def dual_head_classify(class_feats, attn_motion, attn_appearance,
                       cls_motion, cls_appearance, residual=False,
                       literal_pool=False, dropout_rate=0.0, training=False,
                       rng=None):
    """Average the class distributions of the motion and appearance heads."""
    head_m = pool_classify(class_feats, attn_motion, cls_motion, residual=residual,
                           literal_pool=literal_pool, dropout_rate=dropout_rate,
                           training=training, rng=rng)
    head_a = pool_classify(class_feats, attn_appearance, cls_appearance, residual=residual,
                           literal_pool=literal_pool, dropout_rate=dropout_rate,
                           training=training, rng=rng)
    mixed = ad.mul(ad.add(head_m.values, head_a.values), 0.5)
    return ClassDistribution(mixed)


def _apply_classifier(pooled, classifier):
    w = classifier.weight
    if pooled.ndim == 1:
        out = ad.matmul(ad.reshape(pooled, (1, pooled.shape[0])), w)
        return ad.reshape(out, (w.shape[1],))
    return ad.matmul(pooled, w)
