"""Neural-network operations built on the autodiff engine.

Clips and feature volumes are laid out (batch, time, height, width, channel);
the batch axis is optional on every op that documents a per-sample shape.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autodiff import Tensor, _finish, _lift, active_tape, check_finite
from .errors import ConfigError, InputError, NumericError, ShapeError

CLAMP_FLOOR = 1e-12  # shared floor for logs, divisions and norms


def _with_batch(x, per_sample_ndim):
    """Return (array-view tensor, had_batch) adding a length-1 batch if needed."""
    if x.ndim == per_sample_ndim:
        return x.data[None], False
    if x.ndim == per_sample_ndim + 1:
        return x.data, True
    raise ShapeError(
        f"expected rank {per_sample_ndim} or {per_sample_ndim + 1}, got shape {x.shape}"
    )


# ------------------------------------------------------------------- conv3d

def conv3d(x, kernel, stride=(1, 1, 1), padding=(0, 0, 0)):
    """Spatio-temporal convolution.

    x: (T,H,W,Cin) or (N,T,H,W,Cin); kernel: (kt,kh,kw,Cin,Cout).
    Zero padding per axis, positive strides; output size
    floor((in + 2p - k)/s) + 1 per axis and must be positive.
    """
    x = _lift(x)
    kernel = _lift(kernel, like=x)
    if kernel.ndim != 5:
        raise ShapeError(f"kernel must be rank 5 (kt,kh,kw,Cin,Cout), got {kernel.shape}")
    xd, batched = _with_batch(x, 4)
    kt, kh, kw, cin, cout = kernel.shape
    if xd.shape[4] != cin:
        raise ShapeError(f"input channels {xd.shape[4]} do not match kernel Cin {cin}")
    st, sh, sw = stride
    pt, ph, pw = padding
    if min(st, sh, sw) < 1:
        raise ConfigError(f"strides must be positive, got {stride}")
    n, t, h, w, _ = xd.shape
    to = (t + 2 * pt - kt) // st + 1
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (w + 2 * pw - kw) // sw + 1
    if min(to, ho, wo) < 1:
        raise ShapeError(
            f"conv3d output empty: input {xd.shape[1:4]}, kernel {(kt, kh, kw)}, "
            f"stride {stride}, padding {padding}"
        )

    xp = np.pad(xd, ((0, 0), (pt, pt), (ph, ph), (pw, pw), (0, 0)))
    win = sliding_window_view(xp, (kt, kh, kw), axis=(1, 2, 3))
    win = win[:, ::st, ::sh, ::sw]                  # (N,To,Ho,Wo,Cin,kt,kh,kw)
    patches = np.ascontiguousarray(win.transpose(0, 1, 2, 3, 5, 6, 7, 4))
    cols = patches.reshape(n * to * ho * wo, kt * kh * kw * cin)
    kmat = kernel.data.reshape(kt * kh * kw * cin, cout)
    out = (cols @ kmat).reshape(n, to, ho, wo, cout)
    if not batched:
        out = out[0]

    def mk(need):
        def bwd(g):
            gd = g if batched else g[None]
            gflat = gd.reshape(n * to * ho * wo, cout)
            gk = (cols.T @ gflat).reshape(kernel.shape) if need[1] else None
            gx = None
            if need[0]:
                gcols = gflat @ kmat.T
                gpatch = gcols.reshape(n, to, ho, wo, kt, kh, kw, cin)
                gxp = np.zeros_like(xp)
                for it in range(kt):
                    for ih in range(kh):
                        for iw in range(kw):
                            gxp[:, it:it + st * to:st,
                                ih:ih + sh * ho:sh,
                                iw:iw + sw * wo:sw] += gpatch[:, :, :, :, it, ih, iw]
                gx = gxp[:, pt:pt + t, ph:ph + h, pw:pw + w]
                if not batched:
                    gx = gx[0]
            return gx, gk
        return bwd

    return _finish(out, (x, kernel), mk)


def conv3d_reference(x, kernel, stride=(1, 1, 1), padding=(0, 0, 0)):
    """Direct nested-loop convolution; slow, kept as an independent oracle."""
    x = np.asarray(x, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    kt, kh, kw, cin, cout = kernel.shape
    st, sh, sw = stride
    pt, ph, pw = padding
    t, h, w, _ = x.shape
    xp = np.pad(x, ((pt, pt), (ph, ph), (pw, pw), (0, 0)))
    to = (t + 2 * pt - kt) // st + 1
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (w + 2 * pw - kw) // sw + 1
    out = np.zeros((to, ho, wo, cout))
    for ot in range(to):
        for oh in range(ho):
            for ow in range(wo):
                for oc in range(cout):
                    acc = 0.0
                    for it in range(kt):
                        for ih in range(kh):
                            for iw in range(kw):
                                for ic in range(cin):
                                    acc += (xp[ot * st + it, oh * sh + ih, ow * sw + iw, ic]
                                            * kernel[it, ih, iw, ic, oc])
                    out[ot, oh, ow, oc] = acc
    return out


# ----------------------------------------------------------------- pointwise

def pointwise_conv(feats, weight):
    """Bias-free 1x1x1 convolution collapsing the channel axis.

    feats: (...,C); weight: (C,).  Returns logits with the channel axis gone.
    """
    feats = _lift(feats)
    weight = _lift(weight, like=feats)
    if weight.ndim != 1 or feats.shape[-1] != weight.shape[0]:
        raise ShapeError(
            f"pointwise_conv needs feats (...,C) and weight (C,), got {feats.shape} and {weight.shape}"
        )
    out = feats.data @ weight.data

    def mk(need):
        def bwd(g):
            gf = g[..., None] * weight.data if need[0] else None
            gw = np.tensordot(g, feats.data, axes=(tuple(range(g.ndim)),) * 2) if need[1] else None
            return gf, gw
        return bwd

    return _finish(out, (feats, weight), mk)


# ------------------------------------------------------------------- softmax

def _softmax(x, group_ndim):
    """Shared softmax core normalizing jointly over the last group_ndim axes."""
    x = _lift(x)
    check_finite(x.data, "softmax input")
    axes = tuple(range(x.ndim - group_ndim, x.ndim))
    shifted = x.data - x.data.max(axis=axes, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axes, keepdims=True)

    def mk(need):
        def bwd(g):
            inner = (g * out).sum(axis=axes, keepdims=True)
            return (out * (g - inner),)
        return bwd

    return _finish(out, (x,), mk)


def softmax_slices(logits):
    """Softmax over each (H,W) slice of (...,H,W) logits independently."""
    logits = _lift(logits)
    if logits.ndim < 2:
        raise ShapeError(f"softmax_slices needs at least (H,W), got {logits.shape}")
    return _softmax(logits, 2)


def softmax_classes(logits):
    """Softmax over the trailing class axis."""
    return _softmax(_lift(logits), 1)


def gumbel_noise(shape, rng, dtype=np.float32):
    """Standard Gumbel draws; uniforms clamped away from both endpoints."""
    if rng is None:
        raise ConfigError("gumbel noise needs a random generator")
    u = rng.random(shape)
    u = np.clip(u, CLAMP_FLOOR, 1.0 - CLAMP_FLOOR)
    return (-np.log(-np.log(u))).astype(dtype)


# ------------------------------------------------------------------ pooling

def attn_pool(attn, feats, normalize=True):
    """Attention-weighted sum of features over the full grid.

    attn: (T,H,W) or (N,T,H,W); feats: matching (...,C).  Returns (C,) or
    (N,C): sum_t,h,w attn*feats, divided by T unless normalize is off.
    """
    attn = _lift(attn)
    feats = _lift(feats, like=attn)
    ad, abatch = _with_batch(attn, 3)
    fd, fbatch = _with_batch(feats, 4)
    if abatch != fbatch or ad.shape != fd.shape[:4]:
        raise ShapeError(f"attn {attn.shape} does not align with feats {feats.shape}")
    frames = ad.shape[1]
    scale = 1.0 / frames if normalize else 1.0
    out = np.einsum("nthw,nthwc->nc", ad, fd) * scale
    if not abatch:
        out = out[0]

    def mk(need):
        def bwd(g):
            gd = g if abatch else g[None]
            ga = gf = None
            if need[0]:
                ga = np.einsum("nc,nthwc->nthw", gd, fd) * scale
                if not abatch:
                    ga = ga[0]
            if need[1]:
                gf = ad[..., None] * gd[:, None, None, None, :] * scale
                if not fbatch:
                    gf = gf[0]
            return ga, gf
        return bwd

    return _finish(out, (attn, feats), mk)


# ------------------------------------------------------------------- dropout

def dropout(x, rate, rng=None, training=True):
    """Binary dropout with inverted scaling; identity when not training."""
    if rate < 0.0 or rate >= 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    x = _lift(x)
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ConfigError("training-mode dropout needs an rng")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    keep = keep.astype(x.data.dtype)
    out = x.data * keep

    def mk(need):
        def bwd(g):
            return (g * keep,)
        return bwd

    return _finish(out, (x,), mk)


# ---------------------------------------------------------------- batch norm

def batch_norm(x, scale, shift, running_mean, running_var, training,
               momentum=0.9, eps=1e-5):
    """Per-channel normalization over all leading axes of (...,C).

    Training mode normalizes by batch statistics and updates the running
    buffers in place (plain arrays, outside the tape); eval mode uses the
    buffers.  Returns scale * normalized + shift.
    """
    from . import autodiff as ad

    x = _lift(x)
    axes = tuple(range(x.ndim - 1))
    if training:
        mu = tmean_keep(x, axes)
        centered = ad.sub(x, mu)
        var = tmean_keep(ad.mul(centered, centered), axes)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mu.data.reshape(-1)
        running_var *= momentum
        running_var += (1.0 - momentum) * var.data.reshape(-1)
        normed = ad.div(centered, ad.sqrt(ad.add(var, eps)))
    else:
        mu = running_mean.astype(x.data.dtype)
        sd = np.sqrt(running_var.astype(x.data.dtype) + eps)
        normed = ad.div(ad.sub(x, ad.constant(mu)), ad.constant(sd))
    return ad.add(ad.mul(normed, scale), shift)


def tmean_keep(x, axes):
    from . import autodiff as ad
    return ad.tmean(x, axis=axes, keepdims=True)


# -------------------------------------------------------------------- losses

def cross_entropy(probs, labels):
    """Mean negative log-likelihood of integer labels under given probabilities.

    probs: (K,) or (N,K) rows summing to 1; labels: scalar or (N,) ints.
    Probabilities are floored at 1e-12 inside the log; the gradient is zero
    where the floor engages.
    """
    probs = _lift(probs)
    pd, batched = (probs.data, True) if probs.ndim == 2 else (probs.data[None], False)
    labels = np.atleast_1d(np.asarray(labels))
    n, k = pd.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {n}")
    if labels.min() < 0 or labels.max() >= k:
        raise InputError(f"label out of range [0, {k}): {labels}")
    check_finite(pd, "class probabilities")
    picked = pd[np.arange(n), labels]
    clamped = np.maximum(picked, CLAMP_FLOOR)
    out = np.asarray(-np.log(clamped).mean(), dtype=pd.dtype)

    def mk(need):
        def bwd(g):
            gp = np.zeros_like(pd)
            live = picked > CLAMP_FLOOR
            gp[np.arange(n), labels] = np.where(live, -1.0 / clamped, 0.0) * (g / n)
            return (gp if batched else gp[0],)
        return bwd

    return _finish(out, (probs,), mk)


def kl_div_grid(p, q):
    """Sum over every map cell of p*(log p - log q), averaged over the batch.

    p, q: matching (T,H,W) or (N,T,H,W) nonnegative maps.  Zero cells of p
    contribute zero; q is floored at 1e-12.
    """
    p = _lift(p)
    q = _lift(q, like=p)
    if p.shape != q.shape:
        raise ShapeError(f"kl_div_grid needs matching shapes, got {p.shape} and {q.shape}")
    pd, batched = _with_batch(p, 3)
    qd, _ = _with_batch(q, 3)
    if np.any(pd < 0) or np.any(qd < 0):
        raise NumericError("kl_div_grid needs nonnegative maps")
    n = pd.shape[0]
    qs = np.maximum(qd, CLAMP_FLOOR)
    ps = np.maximum(pd, CLAMP_FLOOR)
    terms = np.where(pd > 0, pd * (np.log(ps) - np.log(qs)), 0.0)
    out = np.asarray(terms.sum() / n, dtype=pd.dtype)

    def mk(need):
        def bwd(g):
            gp = gq = None
            if need[0]:
                gp = np.where(pd > 0, np.log(ps) - np.log(qs) + 1.0, 0.0) * (g / n)
                if not batched:
                    gp = gp[0]
            if need[1]:
                gq = -(pd / qs) * (g / n)
                if not batched:
                    gq = gq[0]
            return gp, gq
        return bwd

    return _finish(out, (p, q), mk)
