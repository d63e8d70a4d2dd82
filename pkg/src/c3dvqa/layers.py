"""Convolution, fully connected and pooling layers plus the training objective."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor


def he_normal(shape: Sequence[int], fan_in: int, rng: np.random.Generator, dtype=T.DEFAULT_DTYPE) -> Tensor:
    return T.randn(shape, rng, std=float(np.sqrt(2.0 / fan_in)), dtype=dtype, requires_grad=True)


def _tuple(v, n: int) -> tuple:
    if isinstance(v, int):
        return (v,) * n
    v = tuple(v)
    if len(v) != n:
        raise ValueError(f"expected {n} values, got {v}")
    return v


class _ConvND:
    nsp = 0

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel,
        stride=1,
        padding=0,
        rng: np.random.Generator | None = None,
        dtype=T.DEFAULT_DTYPE,
    ):
        self.kernel = _tuple(kernel, self.nsp)
        self.stride = _tuple(stride, self.nsp)
        self.padding = _tuple(padding, self.nsp)
        if any(s < 1 for s in self.stride) or any(p < 0 for p in self.padding):
            raise ValueError("stride must be positive and padding non-negative")
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = in_channels * int(np.prod(self.kernel))
        self.weight = he_normal((out_channels, in_channels) + self.kernel, fan_in, rng, dtype)
        self.bias = T.zeros((out_channels,), dtype=dtype, requires_grad=True)

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    def output_shape(self, spatial: Sequence[int]) -> tuple:
        return tuple(
            (n + 2 * p - k) // s + 1
            for n, k, s, p in zip(spatial, self.kernel, self.stride, self.padding)
        )

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def __call__(self, x: Tensor) -> Tensor:
        unbatched = x.ndim == self.nsp + 1
        if unbatched:
            x = T.reshape(x, (1,) + x.shape)
        if x.ndim != self.nsp + 2:
            raise ValueError(f"{type(self).__name__} expects rank {self.nsp + 1} or {self.nsp + 2}, got {x.shape}")
        if x.shape[1] != self.in_channels:
            raise ValueError(f"channel mismatch: input has {x.shape[1]}, layer expects {self.in_channels}")
        B = x.shape[0]
        out_sp = T._conv_geometry(x.shape[2:], self.kernel, self.stride, self.padding)
        cols = T.unfold(x, self.kernel, self.stride, self.padding)
        w = T.reshape(self.weight, (self.out_channels, -1))
        y = T.matmul(w, cols)  # (O, B*L)
        y = T.reshape(y, (self.out_channels, B) + out_sp)
        y = T.permute(y, (1, 0) + tuple(range(2, 2 + self.nsp)))
        y = T.bias_add(y, self.bias, axis=1)
        if unbatched:
            y = T.reshape(y, y.shape[1:])
        return y


class Conv2D(_ConvND):
    """2-D convolution over ``(C, H, W)`` or ``(B, C, H, W)`` inputs."""

    nsp = 2


class Conv3D(_ConvND):
    """3-D convolution over ``(C, D, H, W)`` or ``(B, C, D, H, W)`` inputs."""

    nsp = 3


class Linear:
    def __init__(self, in_features: int, out_features: int, rng=None, dtype=T.DEFAULT_DTYPE):
        if in_features < 1 or out_features < 1:
            raise ValueError("Linear needs at least one input and one output")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = he_normal((out_features, in_features), in_features, rng, dtype)
        self.bias = T.zeros((out_features,), dtype=dtype, requires_grad=True)

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.weight.shape[1]:
            raise ValueError(f"Linear expects (B, {self.weight.shape[1]}), got {x.shape}")
        return T.bias_add(T.matmul(x, T.transpose(self.weight)), self.bias, axis=1)


def global_avg_pool(x: Tensor, mode: str = "spatial") -> Tensor:
    """Average a ``(C, D, H, W)`` or ``(B, C, D, H, W)`` map.

    ``spatial`` keeps the frame axis (C x D); ``spatiotemporal`` also averages
    over frames (C).
    """
    if x.ndim not in (4, 5):
        raise ValueError(f"global_avg_pool expects rank 4 or 5, got {x.shape}")
    if mode == "spatial":
        axes = (-2, -1)
    elif mode == "spatiotemporal":
        axes = (-3, -2, -1)
    else:
        raise ValueError(f"unknown pooling mode {mode!r}")
    return T.mean(x, axes)


def avg_pool_spatial(x: Tensor, k: int) -> Tensor:
    """Non-overlapping k x k average pooling on the last two axes."""
    *lead, H, W = x.shape
    if H % k or W % k:
        raise ValueError(f"spatial extent {(H, W)} not divisible by {k}")
    n = len(lead)
    y = T.reshape(x, tuple(lead) + (H // k, k, W // k, k))
    return T.mean(y, (n + 1, n + 3))


@dataclass(frozen=True)
class LossHyperParams:
    lambda1: float = 1.0
    lambda2: float = 1e-4

    def __post_init__(self):
        for name in ("lambda1", "lambda2"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and non-negative, got {v}")


def l2_penalty(weights: Iterable[Tensor]) -> Tensor:
    terms = [T.sum(T.mul(w, w)) for w in weights]
    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)
    return total


def eq1_loss(pred: Tensor, label, weights: Iterable[Tensor], hp: LossHyperParams = LossHyperParams()) -> Tensor:
    """lambda1 * mean squared error + lambda2 * sum of squared weights."""
    label = np.asarray(label, dtype=pred.dtype).reshape(pred.shape)
    if pred.size == 0:
        raise ValueError("empty batch")
    diff = T.sub(pred, Tensor(label, dtype=pred.dtype))
    loss = T.mul(T.mean(T.mul(diff, diff)), hp.lambda1)
    weights = list(weights)
    if hp.lambda2 and weights:
        loss = T.add(loss, T.mul(l2_penalty(weights), hp.lambda2))
    return loss
