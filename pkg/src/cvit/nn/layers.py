"""Convolution, normalization and the small blocks the network is built from."""
from __future__ import annotations

import numpy as np

from .. import tensor as T
from ..errors import ContractError, DimensionError
from ..rng import RngState
from ..tensor import Tensor, get_default_dtype
from .module import Module, Parameter

INIT_STD = 0.02


def _rng(rng):
    return rng if rng is not None else RngState(0)


def _init_weight(rng, shape):
    return _rng(rng).trunc_normal(shape, std=INIT_STD, dtype=get_default_dtype())


class Conv2d(Module):
    """2-D convolution. Bias-free unless ``bias=True`` (only fused or SE convs use one)."""

    kind = "conv"

    def __init__(self, in_channels, out_channels, kernel_size=1, stride=1, padding=0,
                 groups=1, bias=False, rng=None):
        super().__init__()
        if in_channels % groups or out_channels % groups:
            raise DimensionError(
                f"channels ({in_channels}->{out_channels}) not divisible by groups={groups}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        self.groups = groups
        self.weight = Parameter(_init_weight(rng, (out_channels, in_channels // groups, kernel_size, kernel_size)))
        self.bias = Parameter(np.zeros(out_channels, dtype=get_default_dtype())) if bias else None

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise DimensionError(
                f"conv expects {self.in_channels} input channels, got input of shape {x.shape}")
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)

    def output_size(self, h, w):
        k, s, p = self.kernel_size, self.stride, self.padding
        return (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1

    def macs(self, inputs, output):
        _, co, ho, wo = output.shape
        return ho * wo * co * (self.in_channels // self.groups) * self.kernel_size ** 2

    def extra_repr(self):
        return (f"{self.in_channels}, {self.out_channels}, k={self.kernel_size}, "
                f"s={self.stride}, p={self.padding}, g={self.groups}, bias={self.bias is not None}")


class BatchNorm(Module):
    """Per-channel batch normalization over NCHW or NC input."""

    kind = "bn"

    def __init__(self, num_features, eps=1e-5, momentum=0.1):
        super().__init__()
        dt = get_default_dtype()
        self.num_features = num_features
        self.eps = eps
        self.momentum = momentum
        self.weight = Parameter(np.ones(num_features, dtype=dt))
        self.bias = Parameter(np.zeros(num_features, dtype=dt))
        self.register_buffer("running_mean", np.zeros(num_features, dtype=dt))
        self.register_buffer("running_var", np.ones(num_features, dtype=dt))

    def _view(self, x):
        return (1, -1, 1, 1) if x.ndim == 4 else (1, -1)

    def forward(self, x):
        if x.ndim not in (2, 4) or x.shape[1] != self.num_features:
            raise DimensionError(
                f"batch norm over {self.num_features} channels got input of shape {x.shape}")
        view = self._view(x)
        gamma = self.weight.reshape(view)
        beta = self.bias.reshape(view)
        if not self.training:
            scale = 1.0 / np.sqrt(self.running_var + self.eps)
            mu = self.running_mean.reshape(view).astype(x.dtype)
            return (x - mu) * (scale.reshape(view).astype(x.dtype) * gamma) + beta

        axes = (0, 2, 3) if x.ndim == 4 else (0,)
        count = x.size // self.num_features
        if count == 0:
            raise ContractError("batch norm in train mode needs a non-empty batch")
        mu = x.mean(axis=axes, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=axes, keepdims=True)
        out = xc * ((var + self.eps) ** -0.5 * gamma) + beta

        m = self.momentum
        unbiased = var.data.reshape(-1) * (count / (count - 1) if count > 1 else 1.0)
        self.set_buffer("running_mean", ((1 - m) * self.running_mean + m * mu.data.reshape(-1)).astype(self.running_mean.dtype))
        self.set_buffer("running_var", ((1 - m) * self.running_var + m * unbiased).astype(self.running_var.dtype))
        return out

    def extra_repr(self):
        return f"{self.num_features}"


class ConvBN(Module):
    """Bias-free convolution followed by batch norm."""

    def __init__(self, in_channels, out_channels, kernel_size=1, stride=1, padding=0,
                 groups=1, rng=None):
        super().__init__()
        self.c = Conv2d(in_channels, out_channels, kernel_size, stride, padding, groups, rng=rng)
        self.bn = BatchNorm(out_channels)

    @property
    def out_channels(self):
        return self.c.out_channels

    def forward(self, x):
        return self.bn(self.c(x))

    def fuse(self):
        return fold_bn_into_conv(self.c, self.bn)


def fold_bn_into_conv(conv, bn):
    """Return a biased conv computing ``bn(conv(x))`` for an eval-mode ``bn``."""
    if bn.training:
        raise ContractError("cannot fold a batch norm that is in train mode")
    if bn.num_features != conv.out_channels:
        raise DimensionError(
            f"batch norm has {bn.num_features} channels, conv produces {conv.out_channels}")
    dt = conv.weight.dtype
    scale = bn.weight.data.astype(np.float64) / np.sqrt(bn.running_var.astype(np.float64) + bn.eps)
    w = conv.weight.data.astype(np.float64) * scale[:, None, None, None]
    b0 = conv.bias.data.astype(np.float64) if conv.bias is not None else 0.0
    b = bn.bias.data.astype(np.float64) + (b0 - bn.running_mean.astype(np.float64)) * scale
    fused = Conv2d(conv.in_channels, conv.out_channels, conv.kernel_size, conv.stride,
                   conv.padding, conv.groups, bias=True)
    fused.weight = Parameter(w.astype(dt))
    fused.bias = Parameter(b.astype(dt))
    fused.eval()
    return fused


def fuse_model(model):
    """Replace every ConvBN in ``model`` (in place) by its folded conv; model must be in eval mode."""
    done = {}
    for _, m in list(model.named_modules()):
        for name, child in list(m._modules.items()):
            if isinstance(child, ConvBN):
                if id(child) not in done:
                    done[id(child)] = child.fuse()
                m._modules[name] = done[id(child)]
    return model


class Linear(Module):
    kind = "linear"

    def __init__(self, in_features, out_features, bias=True, rng=None):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Parameter(_init_weight(rng, (out_features, in_features)))
        self.bias = Parameter(np.zeros(out_features, dtype=get_default_dtype())) if bias else None

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise DimensionError(f"linear expects (N, {self.in_features}), got {x.shape}")
        # one (1, in) x (in, out) product per row keeps rows batch-size independent
        n = x.shape[0]
        out = T.matmul(x.reshape(n, 1, self.in_features), T.transpose(self.weight, (1, 0)))
        out = out.reshape(n, self.out_features)
        return out + self.bias if self.bias is not None else out

    def macs(self, inputs, output):
        return self.in_features * self.out_features

    def extra_repr(self):
        return f"{self.in_features}, {self.out_features}"


class SqueezeExcite(Module):
    """Channel gating: pool, reduce 1x1 + ReLU, expand 1x1, sigmoid, rescale.

    The two gate convs carry biases since no batch norm follows them.
    """

    def __init__(self, channels, reduction=4, rng=None):
        super().__init__()
        rng = _rng(rng)
        hidden = max(1, channels // reduction)
        self.channels = channels
        self.reduce = Conv2d(channels, hidden, 1, bias=True, rng=rng.child("reduce"))
        self.expand = Conv2d(hidden, channels, 1, bias=True, rng=rng.child("expand"))

    def gate(self, x):
        s = x.mean(axis=(2, 3), keepdims=True)
        return T.sigmoid(self.expand(T.relu(self.reduce(s))))

    def forward(self, x):
        return x * self.gate(x)


class PatchEmbed(Module):
    """Overlapping patch embedding: four 3x3 stride-2 conv+BN+ReLU stages (total stride 16).

    Channels ramp dim/8, dim/4, dim/2, dim.
    """

    def __init__(self, in_channels, dim, rng=None):
        super().__init__()
        rng = _rng(rng)
        if dim % 8:
            raise DimensionError(f"patch embedding dim {dim} must be divisible by 8")
        chans = [in_channels, dim // 8, dim // 4, dim // 2, dim]
        self.in_channels = in_channels
        self.dim = dim
        for i in range(4):
            setattr(self, f"conv{i}", ConvBN(chans[i], chans[i + 1], 3, 2, 1, rng=rng.child(i)))

    def forward(self, x):
        for i in range(4):
            x = T.relu(getattr(self, f"conv{i}")(x))
        return x


class InvertedResidual(Module):
    """Stride-2 downsampling block: expand 1x1, depthwise 3x3/2, SE, project 1x1.

    Each conv has BN; ReLU follows expand and depthwise. Spatial size becomes
    ceil(H/2).
    """

    def __init__(self, in_channels, out_channels, expand_ratio=4, se_reduction=4, rng=None):
        super().__init__()
        rng = _rng(rng)
        hidden = in_channels * expand_ratio
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.expand = ConvBN(in_channels, hidden, 1, rng=rng.child("expand"))
        self.dw = ConvBN(hidden, hidden, 3, 2, 1, groups=hidden, rng=rng.child("dw"))
        self.se = SqueezeExcite(hidden, se_reduction, rng=rng.child("se"))
        self.project = ConvBN(hidden, out_channels, 1, rng=rng.child("project"))

    def forward(self, x):
        x = T.relu(self.expand(x))
        x = T.relu(self.dw(x))
        return self.project(self.se(x))


def subsample_block(block, x, strict=True):
    """Apply an :class:`InvertedResidual` after validating the input.

    ``strict`` rejects odd spatial dims. The assembled network passes
    ``strict=False`` at the 7x7 stage, where stride 2 with padding 1 gives 4x4.
    """
    if x.ndim != 4 or x.shape[1] != block.in_channels:
        raise DimensionError(
            f"subsample block expects {block.in_channels} channels, got shape {x.shape}")
    if strict and (x.shape[2] % 2 or x.shape[3] % 2):
        raise ContractError(f"subsample block needs even spatial dims, got {x.shape[2]}x{x.shape[3]}")
    return block(x)


def inverted_residual_param_count(cin, cout, expand_ratio=4, se_reduction=4):
    hid = cin * expand_ratio
    se_hid = max(1, hid // se_reduction)
    return ((cin * hid + 2 * hid)
            + (hid * 9 + 2 * hid)
            + (hid * se_hid + se_hid + se_hid * hid + hid)
            + (hid * cout + 2 * cout))


def global_avg_pool(x):
    return x.mean(axis=(2, 3))


def as_input(x):
    return x if isinstance(x, Tensor) else T.tensor(x)
