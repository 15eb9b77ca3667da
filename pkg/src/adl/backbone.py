"""Clip encoder: stacked conv3d blocks with two feature taps.

Each block is conv3d -> batch norm -> relu.  The attention tap is the output
of the next-to-last block, the classification tap the output of the last
block; the last block keeps stride 1 on every axis so both taps share one
(frames, height, width) grid.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import ops
from .autodiff import Tensor
from .errors import ConfigError


@dataclass
class BackboneConfig:
    in_channels: int = 3
    widths: tuple = (16, 32, 64)
    strides: tuple = ((2, 2, 2), (2, 2, 2), (1, 1, 1))
    kernel: tuple = (3, 3, 3)
    batchnorm: bool = True
    bn_momentum: float = 0.9

    def __post_init__(self):
        if len(self.widths) != len(self.strides) or len(self.widths) < 2:
            raise ConfigError(
                f"need one stride per block and at least 2 blocks, "
                f"got widths {self.widths} strides {self.strides}")
        if tuple(self.strides[-1]) != (1, 1, 1):
            raise ConfigError(
                f"last block must keep stride (1,1,1) so the attention tap and "
                f"classification tap share a grid, got {self.strides[-1]}")
        if any(s < 1 for st in self.strides for s in st):
            raise ConfigError(f"strides must be positive, got {self.strides}")

    @property
    def attn_channels(self):
        return self.widths[-2]

    @property
    def feat_channels(self):
        return self.widths[-1]

    def grid_shape(self, clip_shape):
        """Tap grid (frames, height, width) for a clip shaped (T,H,W[,C])."""
        dims = list(clip_shape[:3])
        for axis in range(3):
            total = 1
            for st in self.strides:
                total *= st[axis]
            if dims[axis] % total != 0:
                raise ConfigError(
                    f"clip axis {axis} of size {dims[axis]} is not divisible by "
                    f"the cumulative stride {total}")
            dims[axis] //= total
        return tuple(dims)


@dataclass
class FeatureTaps:
    """attn_feats feed the attention heads; class_feats get pooled."""
    attn_feats: Tensor
    class_feats: Tensor


def init_backbone(config, rng, dtype=np.float32):
    """He-normal conv weights; unit batch-norm scale, zero shift.

    Returns (params, buffers): named Tensors and named plain arrays.
    """
    params, buffers = {}, {}
    cin = config.in_channels
    kt, kh, kw = config.kernel
    for i, cout in enumerate(config.widths, start=1):
        fan_in = kt * kh * kw * cin
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(kt, kh, kw, cin, cout))
        params[f"block{i}.weight"] = Tensor(w.astype(dtype), requires_grad=True)
        if config.batchnorm:
            params[f"block{i}.bn_scale"] = Tensor(np.ones(cout, dtype=dtype), requires_grad=True)
            params[f"block{i}.bn_shift"] = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)
            buffers[f"block{i}.bn_mean"] = np.zeros(cout, dtype=dtype)
            buffers[f"block{i}.bn_var"] = np.ones(cout, dtype=dtype)
        else:
            params[f"block{i}.bias"] = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)
        cin = cout
    return params, buffers


def forward_features(clip, params, config, training, buffers=None):
    """Run the block stack; returns FeatureTaps.

    clip: (T,H,W,C) or (N,T,H,W,C) with C == config.in_channels.
    Training mode uses batch statistics and updates the running buffers.
    """
    shape = clip.shape
    if shape[-1] != config.in_channels:
        raise ConfigError(f"clip has {shape[-1]} channels, config wants {config.in_channels}")
    config.grid_shape(shape[-4:-1])
    pad = tuple(k // 2 for k in config.kernel)
    x = clip
    taps = []
    for i, stride in enumerate(config.strides, start=1):
        stride = tuple(stride)
        x = ops.conv3d(x, params[f"block{i}.weight"], stride=stride, padding=pad)
        if config.batchnorm:
            x = ops.batch_norm(x, params[f"block{i}.bn_scale"], params[f"block{i}.bn_shift"],
                               buffers[f"block{i}.bn_mean"], buffers[f"block{i}.bn_var"],
                               training=training, momentum=config.bn_momentum)
        else:
            x = ad.add(x, params[f"block{i}.bias"])
        x = ad.relu(x)
        taps.append(x)
    return FeatureTaps(attn_feats=taps[-2], class_feats=taps[-1])
