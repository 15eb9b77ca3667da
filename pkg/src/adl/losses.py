"""Training objectives: classification, map divergences, feature matching."""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import ops
from .attention import AttentionMap, uniform_map
from .errors import ConfigError


@dataclass
class LossBreakdown:
    """Scalar summary of one objective evaluation.

    total == ce + lambda_distill * kl_distill + lambda_uniform * kl_uniform
    up to float tolerance; the distill slot carries whichever auxiliary
    mimicry term the run uses (map divergence or feature matching).
    """
    total: float
    ce: float
    kl_distill: float
    kl_uniform: float
    lambda_distill: float
    lambda_uniform: float

    def as_dict(self):
        return {
            "total": self.total, "ce": self.ce,
            "kl_distill": self.kl_distill, "kl_uniform": self.kl_uniform,
            "lambda_distill": self.lambda_distill, "lambda_uniform": self.lambda_uniform,
        }


def _values(m):
    return m.values if isinstance(m, AttentionMap) else m


def cross_entropy(pred, labels):
    """Mean negative log-probability of the labels; pred rows sum to 1."""
    probs = pred.values if hasattr(pred, "values") else pred
    return ops.cross_entropy(probs, labels)


def kl_per_slice(map_p, map_q):
    """Map divergence summed over every time slice, batch averaged.

    Asymmetric: the first argument is the distribution whose support weights
    the log-ratio, so distillation passes (student, teacher) to pull the
    student toward the frozen target.
    """
    return ops.kl_div_grid(_values(map_p), _values(map_q))


def default_lambda(grid_shape):
    """1 / (grid cells): balances a summed map divergence against the CE term."""
    t, h, w = grid_shape
    return 1.0 / (t * h * w)


def total_loss(pred, labels, attn_motion, attn_teacher, attn_appearance,
               grid_shape, lambda_distill=None, lambda_uniform=None):
    """Full objective: CE + distillation pull + uniform-map regularizer.

    The motion map is pulled toward the (frozen) teacher map, the appearance
    map toward uniform.  Both weights default to 1/(grid cells).  Returns
    (scalar loss tensor, LossBreakdown).
    """
    if lambda_distill is None:
        lambda_distill = default_lambda(grid_shape)
    if lambda_uniform is None:
        lambda_uniform = default_lambda(grid_shape)
    ce = cross_entropy(pred, labels)
    kl_d = kl_per_slice(attn_motion, attn_teacher)
    app_values = _values(attn_appearance)
    uni = uniform_map(app_values.shape, dtype=app_values.data.dtype)
    kl_u = kl_per_slice(attn_appearance, uni)
    total = ad.add(ce, ad.add(ad.mul(kl_d, lambda_distill), ad.mul(kl_u, lambda_uniform)))
    breakdown = LossBreakdown(
        total=float(total.data), ce=float(ce.data),
        kl_distill=float(kl_d.data), kl_uniform=float(kl_u.data),
        lambda_distill=float(lambda_distill), lambda_uniform=float(lambda_uniform),
    )
    return total, breakdown


def featmatch_loss(class_feats_student, class_feats_teacher):
    """Distance between channel-collapsed, L2-normalized activation maps.

    Per sample: take the maximum absolute activation over channels at each
    grid cell, flatten, L2-normalize (norm floored at 1e-12), and return the
    squared distance between the student and teacher vectors, batch averaged.
    Invariant to positive rescaling of either feature volume.
    """
    s = _flat_saliency(class_feats_student)
    t = _flat_saliency(class_feats_teacher)
    if s.shape != t.shape:
        raise ConfigError(
            f"feature grids do not match: {class_feats_student.shape} vs "
            f"{class_feats_teacher.shape}")
    diff = ad.sub(s, t)
    sq = ad.mul(diff, diff)
    per_sample = ad.tsum(sq, axis=1)
    return ad.tmean(per_sample)


def _flat_saliency(feats):
    """(N,T,H,W,C) or (T,H,W,C) -> (N, T*H*W) unit-norm saliency rows."""
    if feats.ndim == 4:
        feats = ad.reshape(feats, (1,) + tuple(feats.shape))
    n = feats.shape[0]
    cells = int(np.prod(feats.shape[1:4]))
    sal = ad.tmax(ad.absolute(feats), axis=4)
    flat = ad.reshape(sal, (n, cells))
    norm = ad.sqrt(ad.tsum(ad.mul(flat, flat), axis=1, keepdims=True))
    return ad.div(flat, ad.clamp_min(norm, ops.CLAMP_FLOOR))
