"""Cascaded group attention and the cascaded-chunk ViT block."""
from __future__ import annotations

import math

from . import tensor as T
from .ccffn import CCFFN, FFN
from .errors import DimensionError
from .nn.layers import ConvBN
from .nn.module import Module, ModuleList
from .rng import RngState

KEY_DIM = 16
QUERY_DW_KERNEL = 3


def scaled_dot_attention(q, k, v):
    """Softmax attention over tokens.

    ``q``/``k`` are (N, d_k, L), ``v`` is (N, d_v, L). Returns the attended
    values (N, d_v, L) and the weights (N, L_query, L_key).
    """
    d_k = q.shape[1]
    scores = T.matmul(T.transpose(q, (0, 2, 1)), k) * (1.0 / math.sqrt(d_k))
    attn = T.softmax(scores)
    return T.matmul(v, T.transpose(attn, (0, 2, 1))), attn


def head_widths(dim, heads):
    """Channel slice width per head: equal when ``heads`` divides ``dim``,
    otherwise the first ``dim % heads`` heads take one extra channel."""
    base, extra = divmod(dim, heads)
    return [base + 1 if i < extra else base for i in range(heads)]


class CascadedGroupAttention(Module):
    """Each head attends over its own channel slice plus the previous head's output.

    Head ``i`` gets ``x_i (+ out_{i-1})``; a 1x1 conv produces Q, K (``key_dim``
    channels each) and V (as wide as the head's slice); Q passes through a
    depthwise 3x3 conv. Head outputs are concatenated, ReLU'd and projected
    back to C. When slices are uneven the carried output is cropped to the
    next, narrower slice.
    """

    kind = "attention"

    def __init__(self, dim, heads, key_dim=KEY_DIM, q_kernel=QUERY_DW_KERNEL, rng=None):
        super().__init__()
        rng = rng if rng is not None else RngState(0)
        if heads < 1 or heads > dim:
            raise DimensionError(f"cannot split dim {dim} across heads={heads}")
        self.dim = dim
        self.heads = heads
        self.key_dim = key_dim
        self.widths = head_widths(dim, heads)
        self.scale = key_dim ** -0.5
        self.qkvs = ModuleList(ConvBN(w, 2 * key_dim + w, 1, rng=rng.child(f"qkv{i}"))
                               for i, w in enumerate(self.widths))
        self.dws = ModuleList(ConvBN(key_dim, key_dim, q_kernel, 1, q_kernel // 2, groups=key_dim,
                                     rng=rng.child(f"dw{i}"))
                              for i in range(heads))
        self.proj = ConvBN(dim, dim, 1, rng=rng.child("proj"))

    def heads_forward(self, x):
        """Per-head outputs (N, width_i, H, W) and attention maps, before projection."""
        if x.ndim != 4 or x.shape[1] != self.dim:
            raise DimensionError(f"attention expects {self.dim} channels, got input of shape {x.shape}")
        n, _, h, w = x.shape
        kd = self.key_dim
        outs, maps = [], []
        feat = None
        start = 0
        for i, hd in enumerate(self.widths):
            xi = T.narrow(x, 1, start, start + hd)
            start += hd
            if feat is not None:
                if feat.shape[1] != hd:
                    feat = T.narrow(feat, 1, 0, hd)
                xi = xi + feat
            qkv = self.qkvs[i](xi)
            q = self.dws[i](T.narrow(qkv, 1, 0, kd))
            k = T.narrow(qkv, 1, kd, 2 * kd)
            v = T.narrow(qkv, 1, 2 * kd, 2 * kd + hd)
            o, attn = scaled_dot_attention(q.reshape(n, kd, h * w), k.reshape(n, kd, h * w),
                                           v.reshape(n, hd, h * w))
            feat = o.reshape(n, hd, h, w)
            outs.append(feat)
            maps.append(attn)
        return outs, maps

    def forward(self, x):
        outs, _ = self.heads_forward(x)
        return self.proj(T.relu(T.concat(outs, axis=1)))

    def macs(self, inputs, output):
        _, _, h, w = output.shape
        tokens = h * w
        return sum(tokens * tokens * (self.key_dim + w) for w in self.widths)

    def extra_repr(self):
        return f"dim={self.dim}, heads={self.heads}, key_dim={self.key_dim}"


def cga_forward(layer, x):
    return layer(x)


class TokenInteraction(ConvBN):
    """Depthwise 3x3 conv + BN."""

    def __init__(self, dim, rng=None):
        super().__init__(dim, dim, 3, 1, 1, groups=dim, rng=rng)


def make_ffn(dim, kind="ccffn", chunks=2, expansion=2.5, cascade=True, projection=False, rng=None):
    if kind == "ccffn":
        return CCFFN(dim, chunks, expansion, cascade, projection, rng=rng)
    if kind == "plain":
        return FFN(dim, expansion, rng=rng)
    raise ValueError(f"unknown FFN kind {kind!r}")


class CViTBlock(Module):
    """Token interaction, pre-FFN, attention, token interaction, post-FFN; each residual."""

    def __init__(self, dim, heads, ffn_kind="ccffn", chunks=2, expansion=2.5, cascade=True,
                 projection=False, post_expansion=None, rng=None):
        super().__init__()
        rng = rng if rng is not None else RngState(0)
        self.dim = dim
        self.dw0 = TokenInteraction(dim, rng=rng.child("dw0"))
        self.ffn0 = make_ffn(dim, ffn_kind, chunks, expansion, cascade, projection, rng=rng.child("ffn0"))
        self.attn = CascadedGroupAttention(dim, heads, rng=rng.child("attn"))
        self.dw1 = TokenInteraction(dim, rng=rng.child("dw1"))
        self.ffn1 = make_ffn(dim, ffn_kind, chunks, post_expansion or expansion, cascade, projection,
                             rng=rng.child("ffn1"))

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.dim:
            raise DimensionError(f"block expects {self.dim} channels, got input of shape {x.shape}")
        x = x + self.dw0(x)
        x = x + self.ffn0(x)
        x = x + self.attn(x)
        x = x + self.dw1(x)
        return x + self.ffn1(x)


def block_forward(block, x):
    return block(x)
