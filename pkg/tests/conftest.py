import numpy as np
import pytest

from cvit import tensor as T
from cvit.rng import RngState


@pytest.fixture
def rng():
    return RngState(1234)


@pytest.fixture
def f64():
    with T.precision(np.float64):
        yield


def naive_conv2d(x, w, stride=1, padding=0, groups=1):
    """Seven nested loops; the reference every conv path is checked against."""
    n, cin, h, wd = x.shape
    cout, cpg, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    opg = cout // groups
    for b in range(n):
        for o in range(cout):
            g = o // opg
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for c in range(cpg):
                        for di in range(k):
                            for dj in range(k):
                                acc += xp[b, g * cpg + c, i * stride + di, j * stride + dj] * w[o, c, di, dj]
                    out[b, o, i, j] = acc
    return out


def np_bn(bn, y):
    scale = bn.weight.data / np.sqrt(bn.running_var + bn.eps)
    view = (1, -1, 1, 1) if y.ndim == 4 else (1, -1)
    return (y - bn.running_mean.reshape(view)) * scale.reshape(view) + bn.bias.data.reshape(view)


def np_conv(conv, x):
    y = naive_conv2d(x, conv.weight.data.astype(np.float64), conv.stride, conv.padding, conv.groups)
    if conv.bias is not None:
        y = y + conv.bias.data[None, :, None, None]
    return y


def np_convbn(cb, x):
    return np_bn(cb.bn, np_conv(cb.c, x))


def scramble(module, rng, conv_std=0.3):
    """O(1) weights and non-trivial eval-mode BN statistics, in the module's dtype."""
    from cvit.nn import BatchNorm, Conv2d, Linear
    for i, (_, m) in enumerate(module.named_modules()):
        r = rng.child(i)
        if isinstance(m, (Conv2d, Linear)):
            dt = m.weight.dtype
            m.weight.data = r.normal(m.weight.shape, std=conv_std, dtype=dt)
            if m.bias is not None:
                m.bias.data = r.child("bias").normal(m.bias.shape, std=0.1, dtype=dt)
        if isinstance(m, BatchNorm):
            dt = m.weight.dtype
            m.weight.data = r.uniform(m.weight.shape, 0.5, 1.5, dtype=dt)
            m.bias.data = r.child("b").normal(m.bias.shape, std=0.2, dtype=dt)
            m.set_buffer("running_mean", r.child("m").normal(m.weight.shape, std=0.1, dtype=dt))
            m.set_buffer("running_var", r.child("v").uniform(m.weight.shape, 0.5, 2.0, dtype=dt))
    return module.eval()


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
