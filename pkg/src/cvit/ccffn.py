"""Cascaded-chunk feed-forward network.

The input's channels are split into ``n`` equal contiguous chunks. Chunk ``i``
runs through its own small FFN after the previous chunk's FFN output has been
added to it; the chunk outputs are concatenated back together::

    X_1..X_n = split(X)
    X'_1 = X_1,   X'_i = X_i + Y_{i-1}  (i > 1)
    Y_i = FFN_i(X'_i)
    out = concat(Y_1..Y_n)

With ``cascade=False`` each chunk sees only its own input. With
``projection=True`` the carried output passes through a 1x1 conv + BN first.
"""
from __future__ import annotations

import math
from fractions import Fraction

from . import tensor as T
from .errors import DimensionError
from .nn.layers import ConvBN
from .nn.module import Module, ModuleList
from .rng import RngState

DEFAULT_CHUNKS = 2
DEFAULT_EXPANSION = 2.5
BACKBONE_EXPANSION = 2


def hidden_width(channels, expansion):
    """floor(expansion * channels), at least 1."""
    return max(1, math.floor(Fraction(str(expansion)) * channels))


class ChunkFFN(Module):
    """1x1 conv+BN, ReLU, 1x1 conv+BN; ``channels -> hidden -> channels``."""

    def __init__(self, channels, hidden, rng=None):
        super().__init__()
        rng = rng if rng is not None else RngState(0)
        if hidden < 1:
            raise DimensionError(f"FFN hidden width must be >= 1, got {hidden}")
        self.channels = channels
        self.hidden = hidden
        self.expand = ConvBN(channels, hidden, 1, rng=rng.child("expand"))
        self.project = ConvBN(hidden, channels, 1, rng=rng.child("project"))

    def forward(self, x):
        return self.project(T.relu(self.expand(x)))

    def extra_repr(self):
        return f"{self.channels}->{self.hidden}->{self.channels}"


def FFN(channels, expansion=BACKBONE_EXPANSION, rng=None):
    """Plain (unchunked) FFN as used by the backbone."""
    return ChunkFFN(channels, hidden_width(channels, expansion), rng=rng)


def split_channels(x, n):
    """Partition NCHW ``x`` into ``n`` contiguous channel chunks, in order."""
    if n < 1:
        raise DimensionError(f"chunk count must be >= 1, got {n}")
    c = x.shape[1]
    if c % n:
        raise DimensionError(f"channels C={c} not divisible into n={n} chunks")
    if n == 1:
        return [x]
    step = c // n
    return [T.narrow(x, 1, i * step, (i + 1) * step) for i in range(n)]


class CCFFN(Module):
    def __init__(self, channels, chunks=DEFAULT_CHUNKS, expansion=DEFAULT_EXPANSION,
                 cascade=True, projection=False, rng=None):
        super().__init__()
        rng = rng if rng is not None else RngState(0)
        if chunks < 1 or channels % chunks:
            raise DimensionError(f"channels C={channels} not divisible into n={chunks} chunks")
        self.channels = channels
        self.chunks = chunks
        self.expansion = expansion
        self.cascade = cascade
        self.chunk_channels = channels // chunks
        self.hidden = hidden_width(self.chunk_channels, expansion)
        self.ffns = ModuleList(ChunkFFN(self.chunk_channels, self.hidden, rng=rng.child(f"ffn{i}"))
                               for i in range(chunks))
        # the projection only acts on the carried output, so it needs a cascade
        if projection and cascade and chunks > 1:
            self.proj = ModuleList(ConvBN(self.chunk_channels, self.chunk_channels, 1, rng=rng.child(f"proj{i}"))
                                   for i in range(chunks - 1))
        else:
            self.proj = None

    @property
    def projection(self):
        return self.proj is not None

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise DimensionError(f"CCFFN expects {self.channels} channels, got input of shape {x.shape}")
        if self.chunks == 1:
            return self.ffns[0](x)
        outs = []
        prev = None
        for i, xi in enumerate(split_channels(x, self.chunks)):
            if self.cascade and prev is not None:
                carry = self.proj[i - 1](prev) if self.proj is not None else prev
                xi = xi + carry
            prev = self.ffns[i](xi)
            outs.append(prev)
        return T.concat(outs, axis=1)

    def extra_repr(self):
        return (f"C={self.channels}, n={self.chunks}, e={self.expansion}, "
                f"cascade={self.cascade}, projection={self.projection}")


def ccffn_forward(layer, x):
    return layer(x)


def ccffn_param_count(layer):
    """Closed-form learnable parameter count (BN gamma/beta included)."""
    n, c, h = layer.chunks, layer.chunk_channels, layer.hidden
    count = n * (c * h + 2 * h + h * c + 2 * c)
    if layer.projection:
        count += (n - 1) * (c * c + 2 * c)
    return count


def ccffn_flops(layer, height, width):
    """Closed-form MACs per image at spatial size ``height x width``."""
    n, c, h = layer.chunks, layer.chunk_channels, layer.hidden
    macs = height * width * n * (c * h + h * c)
    if layer.projection:
        macs += height * width * (n - 1) * c * c
    return macs
