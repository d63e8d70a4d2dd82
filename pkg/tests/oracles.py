"""Independent reference implementations and fixtures shared by the test modules."""

import numpy as np

from c3dvqa.layers import Conv2D, Conv3D
from c3dvqa.tensor import Tensor

def naive_conv2d(x, w, b, stride, pad):
    C, H, W = x.shape
    O, _, kh, kw = w.shape
    xp = np.zeros((C, H + 2 * pad[0], W + 2 * pad[1]))
    xp[:, pad[0]:pad[0] + H, pad[1]:pad[1] + W] = x
    Ho = (H + 2 * pad[0] - kh) // stride[0] + 1
    Wo = (W + 2 * pad[1] - kw) // stride[1] + 1
    out = np.zeros((O, Ho, Wo))
    for o in range(O):
        for i in range(Ho):
            for j in range(Wo):
                acc = float(b[o])
                for c in range(C):
                    for u in range(kh):
                        for v in range(kw):
                            acc += w[o, c, u, v] * xp[c, i * stride[0] + u, j * stride[1] + v]
                out[o, i, j] = acc
    return out


def naive_conv3d(x, w, b, stride, pad):
    C, D, H, W = x.shape
    O, _, kt, kh, kw = w.shape
    xp = np.zeros((C, D + 2 * pad[0], H + 2 * pad[1], W + 2 * pad[2]))
    xp[:, pad[0]:pad[0] + D, pad[1]:pad[1] + H, pad[2]:pad[2] + W] = x
    Do = (D + 2 * pad[0] - kt) // stride[0] + 1
    Ho = (H + 2 * pad[1] - kh) // stride[1] + 1
    Wo = (W + 2 * pad[2] - kw) // stride[2] + 1
    out = np.zeros((O, Do, Ho, Wo))
    for o in range(O):
        for d in range(Do):
            for i in range(Ho):
                for j in range(Wo):
                    acc = float(b[o])
                    for c in range(C):
                        for s in range(kt):
                            for u in range(kh):
                                for v in range(kw):
                                    acc += w[o, c, s, u, v] * xp[c, d * stride[0] + s,
                                                                 i * stride[1] + u, j * stride[2] + v]
                    out[o, d, i, j] = acc
    return out


def random_conv2d_case(rng):
    C, O = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    k = (int(rng.integers(1, 4)), int(rng.integers(1, 4)))
    s = (int(rng.integers(1, 3)), int(rng.integers(1, 3)))
    p = (int(rng.integers(0, 2)), int(rng.integers(0, 2)))
    H, W = int(rng.integers(k[0], 10)), int(rng.integers(k[1], 10))
    layer = Conv2D(C, O, k, s, p, rng=rng)
    layer.bias.data = rng.standard_normal(O).astype(np.float32)
    x = rng.standard_normal((C, H, W)).astype(np.float32)
    return layer, x


def random_conv3d_case(rng):
    C, O = int(rng.integers(1, 3)), int(rng.integers(1, 4))
    k = tuple(int(v) for v in rng.integers(1, 4, size=3))
    s = tuple(int(v) for v in rng.integers(1, 3, size=3))
    p = tuple(int(v) for v in rng.integers(0, 2, size=3))
    D, H, W = (int(rng.integers(k[i], 7)) for i in range(3))
    layer = Conv3D(C, O, k, s, p, rng=rng)
    layer.bias.data = rng.standard_normal(O).astype(np.float32)
    x = rng.standard_normal((C, D, H, W)).astype(np.float32)
    return layer, x


def conv2d_oracle_max_error(n_cases=50, seed=0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_cases):
        layer, x = random_conv2d_case(rng)
        got = layer(Tensor(x)).data
        want = naive_conv2d(x, layer.weight.data, layer.bias.data, layer.stride, layer.padding)
        worst = max(worst, float(np.max(np.abs(got - want))))
    return worst


def conv3d_oracle_max_error(n_cases=50, seed=0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_cases):
        layer, x = random_conv3d_case(rng)
        got = layer(Tensor(x)).data
        want = naive_conv3d(x, layer.weight.data, layer.bias.data, layer.stride, layer.padding)
        worst = max(worst, float(np.max(np.abs(got - want))))
    return worst


def overfit_clips(n=8, frames=8, size=32, seed=1, lo=0.1, hi=1.0):
    """``n`` clip pairs with residuals of distinct magnitude and arbitrary labels in [0, 1]."""
    rng = np.random.default_rng(seed)
    dist = rng.uniform(0, 1, (n, 1, frames, size, size)).astype(np.float32)
    scale = rng.uniform(lo, hi, (n, 1, 1, 1, 1))
    res = np.clip(rng.normal(0, 1, dist.shape) * scale, -1, 1).astype(np.float32)
    return dist, res, rng.uniform(0, 1, n)
