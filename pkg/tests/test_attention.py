import numpy as np
import pytest

from cvit import tensor as T
from cvit.attention import (KEY_DIM, CascadedGroupAttention, CViTBlock, head_widths,
                            scaled_dot_attention)
from cvit.errors import DimensionError
from cvit.model import preset
from cvit.nn import BatchNorm, Conv2d
from cvit.rng import RngState

from conftest import naive_conv2d


def _scramble(module, r):
    for i, (_, m) in enumerate(module.named_modules()):
        if isinstance(m, Conv2d):
            m.weight.data = r.child(i).normal(m.weight.shape, std=0.4, dtype=m.weight.dtype)
        if isinstance(m, BatchNorm):
            m.weight.data = r.child(i).uniform(m.weight.shape, 0.5, 1.5, dtype=m.weight.dtype)
            m.bias.data = r.child(i).child("b").normal(m.bias.shape, std=0.2, dtype=m.weight.dtype)
            m.set_buffer("running_mean", r.child(i).child("m").normal(m.weight.shape, std=0.1,
                                                                        dtype=m.weight.dtype))
            m.set_buffer("running_var", r.child(i).child("v").uniform(m.weight.shape, 0.5, 2,
                                                                        dtype=m.weight.dtype))
    return module.eval()


def _convbn(cb, x):
    bn = cb.bn
    y = naive_conv2d(x, cb.c.weight.data, cb.c.stride, cb.c.padding, cb.c.groups)
    scale = bn.weight.data / np.sqrt(bn.running_var + bn.eps)
    return (y - bn.running_mean[None, :, None, None]) * scale[None, :, None, None] + bn.bias.data[None, :, None, None]


def flat_attention(layer, x):
    """Single-head reference built from numpy loops and explicit softmax."""
    n, c, h, w = x.shape
    qkv = _convbn(layer.qkvs[0], x)
    q = _convbn(layer.dws[0], qkv[:, :KEY_DIM]).reshape(n, KEY_DIM, h * w)
    k = qkv[:, KEY_DIM:2 * KEY_DIM].reshape(n, KEY_DIM, h * w)
    v = qkv[:, 2 * KEY_DIM:].reshape(n, c, h * w)
    out = np.zeros((n, c, h * w))
    for b in range(n):
        for i in range(h * w):
            s = np.array([q[b, :, i] @ k[b, :, j] for j in range(h * w)]) / np.sqrt(KEY_DIM)
            p = np.exp(s - s.max())
            p /= p.sum()
            out[b, :, i] = v[b] @ p
    z = np.maximum(out.reshape(n, c, h, w), 0)
    return _convbn(layer.proj, z)


class TestAttention:
    def test_single_head_matches_flat_oracle(self, rng, f64):
        layer = _scramble(CascadedGroupAttention(6, 1, rng=rng).to(np.float64), rng.child("s"))
        x = rng.child("x").normal((2, 6, 3, 3), dtype=np.float64)
        np.testing.assert_allclose(layer(T.tensor(x)).data, flat_attention(layer, x), atol=1e-10)

    def test_constant_input_uniform_weights(self, rng):
        layer = _scramble(CascadedGroupAttention(8, 2, rng=rng), rng.child("s"))
        _, maps = layer.heads_forward(T.tensor(np.full((1, 8, 4, 4), 0.7)))
        # dw conv with zero padding breaks translation symmetry on the query side;
        # keys are identical, so every row is still uniform
        for m in maps:
            np.testing.assert_allclose(m.data, 1 / 16, atol=1e-6)

    def test_rows_sum_to_one(self, rng):
        layer = _scramble(CascadedGroupAttention(8, 2, rng=rng), rng.child("s"))
        _, maps = layer.heads_forward(T.tensor(rng.child("x").normal((2, 8, 4, 4), std=3.0)))
        for m in maps:
            np.testing.assert_allclose(m.data.sum(-1), 1, atol=1e-6)

    def test_head_causality(self, rng):
        layer = _scramble(CascadedGroupAttention(12, 3, rng=rng), rng.child("s"))
        x = rng.child("x").normal((1, 12, 3, 3))
        base, _ = layer.heads_forward(T.tensor(x))
        for j in range(3):
            xp = x.copy()
            xp[:, 4 * j:4 * (j + 1)] += 1.0
            outs, _ = layer.heads_forward(T.tensor(xp))
            for i in range(3):
                same = outs[i].data.tobytes() == base[i].data.tobytes()
                assert same == (i < j)

    def test_token_permutation_equivariance(self, rng, f64):
        q, k, v = (rng.child(s).normal((2, 16, 9), dtype=np.float64) for s in "qkv")
        perm = rng.child("p").permutation(9)
        out, attn = scaled_dot_attention(T.tensor(q), T.tensor(k), T.tensor(v))
        out_p, attn_p = scaled_dot_attention(T.tensor(q[..., perm]), T.tensor(k[..., perm]),
                                             T.tensor(v[..., perm]))
        np.testing.assert_allclose(out_p.data, out.data[..., perm], atol=1e-12)
        np.testing.assert_allclose(attn_p.data, attn.data[:, perm][:, :, perm], atol=1e-12)

    def test_uneven_heads(self):
        assert head_widths(128, 3) == [43, 43, 42]
        layer = CascadedGroupAttention(128, 3)
        assert layer(T.zeros((1, 128, 2, 2))).shape == (1, 128, 2, 2)

    def test_bad_heads(self):
        with pytest.raises(DimensionError):
            CascadedGroupAttention(4, 5)

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            CascadedGroupAttention(8, 2)(T.zeros((1, 6, 2, 2)))


class TestBlock:
    def test_zero_output_weights_is_identity(self, rng):
        block = CViTBlock(8, 2, rng=rng)
        for cb in [block.dw0, block.attn.proj, block.dw1]:
            cb.c.weight.data[:] = 0
        for ffn in (block.ffn0, block.ffn1):
            for f in ffn.ffns:
                f.project.c.weight.data[:] = 0
        x = rng.child("x").normal((2, 8, 4, 4))
        assert np.array_equal(block(T.tensor(x)).data, x)

    def test_m_stage_shape(self):
        cfg = preset("M")
        block = CViTBlock(cfg.dims[0], cfg.heads[0])
        assert block(T.zeros((1, 128, 14, 14))).shape == (1, 128, 14, 14)

    @pytest.mark.parametrize("name", ["S", "M", "L", "XL"])
    def test_shape_preserving_all_presets(self, name):
        cfg = preset(name)
        for c, h in zip(cfg.dims, cfg.heads):
            assert CViTBlock(c, h)(T.zeros((1, c, 2, 2))).shape == (1, c, 2, 2)
