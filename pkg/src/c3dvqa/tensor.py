"""Dense tensors with tape-based reverse-mode differentiation.

Storage is a numpy array (float32 by default, float64 on request for
gradient checking).  Reductions always accumulate in float64.

Operations only record onto a :class:`Tape` while one is active in the
current thread::

    with Tape() as tape:
        loss = ops.sum(ops.mul(x, x))
    tape.backward(loss)

Outside a tape every op is a plain numpy computation (inference mode).
"""

from __future__ import annotations

import itertools
import sys
import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_local = threading.local()


class Tensor:
    """N-dimensional real array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE if dtype is None else dtype)
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


# ---------------------------------------------------------------------------
# tape


class _Record:
    __slots__ = ("output", "inputs", "backward")

    def __init__(self, output: Tensor, inputs: tuple, backward: Callable):
        self.output = output
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of differentiable operations for one forward pass."""

    def __init__(self):
        self.records: list[_Record] = []
        self._produced: set[int] = set()

    def __enter__(self) -> "Tape":
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("tape exited out of order")
        stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    def record(self, output: Tensor, inputs: tuple, backward: Callable) -> None:
        self.records.append(_Record(output, inputs, backward))
        self._produced.add(id(output))

    def backward(self, loss: Tensor) -> None:
        backward(loss, self)


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> Optional[Tape]:
    stack = _tape_stack()
    return stack[-1] if stack else None


def _accumulate(store: dict, t: Tensor, g: np.ndarray) -> None:
    key = id(t)
    if key in store:
        store[key] = store[key] + g
    else:
        store[key] = g


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate ``.grad`` of every leaf tensor that ``loss`` depends on.

    Leaf gradients accumulate across calls; the optimizer clears them.
    """
    if loss.shape != ():
        raise ValueError(f"loss must be a scalar (rank 0), got shape {loss.shape}")
    if id(loss) not in tape._produced:
        raise ValueError("loss was not produced on this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.dtype)}
    leaves: dict[int, Tensor] = {}
    for rec in reversed(tape.records):
        g_out = grads.pop(id(rec.output), None)
        if g_out is None:
            continue
        g_in = rec.backward(g_out)
        for inp, g in zip(rec.inputs, g_in):
            if g is None or not inp.requires_grad:
                continue
            if g.shape != inp.shape:
                raise RuntimeError(
                    f"backward produced gradient of shape {g.shape} for input {inp.shape}"
                )
            _accumulate(grads, inp, g)
            if id(inp) not in tape._produced:
                leaves[id(inp)] = inp

    for key, leaf in leaves.items():
        g = grads.get(key)
        if g is None:
            continue
        g = np.asarray(g, dtype=leaf.dtype)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


def _result(data: np.ndarray, inputs: tuple, bw: Callable) -> Tensor:
    tape = active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=track)
    if track:
        out.data.flags.writeable = False
        tape.record(out, inputs, bw)
    return out


# ---------------------------------------------------------------------------
# construction


def _check_shape(shape: Iterable[int]) -> tuple:
    shape = tuple(int(s) for s in shape)
    n = 1
    for s in shape:
        if s < 0:
            raise ValueError(f"negative extent in shape {shape}")
        n *= s
    if n > sys.maxsize:
        raise OverflowError(f"shape {shape} overflows the flat index space")
    return shape


def full(shape: Sequence[int], fill: float, dtype=DEFAULT_DTYPE, requires_grad=False) -> Tensor:
    return Tensor(np.full(_check_shape(shape), fill, dtype=dtype), requires_grad=requires_grad)


def zeros(shape: Sequence[int], dtype=DEFAULT_DTYPE, requires_grad=False) -> Tensor:
    return full(shape, 0.0, dtype, requires_grad)


def randn(
    shape: Sequence[int],
    rng: np.random.Generator,
    std: float = 1.0,
    dtype=DEFAULT_DTYPE,
    requires_grad=False,
) -> Tensor:
    data = rng.standard_normal(_check_shape(shape)) * std
    return Tensor(data.astype(dtype), requires_grad=requires_grad)


def uniform(
    shape: Sequence[int],
    rng: np.random.Generator,
    low: float = 0.0,
    high: float = 1.0,
    dtype=DEFAULT_DTYPE,
    requires_grad=False,
) -> Tensor:
    data = rng.uniform(low, high, _check_shape(shape))
    return Tensor(data.astype(dtype), requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# elementwise


def _binary_operands(a, b):
    a_t, b_t = isinstance(a, Tensor), isinstance(b, Tensor)
    if a_t and b_t:
        if a.shape != b.shape:
            raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
        return a, b
    if a_t and np.ndim(b) == 0:
        return a, float(b)
    if b_t and np.ndim(a) == 0:
        return float(a), b
    raise TypeError("elementwise ops take two equal-shape tensors or a tensor and a scalar")


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    if not isinstance(a, Tensor):
        a, b = b, a
    if isinstance(b, Tensor):
        return _result(a.data + b.data, (a, b), lambda g: (g, g))
    return _result(a.data + a.dtype.type(b), (a,), lambda g: (g,))


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        return _result(a.data - b.data, (a, b), lambda g: (g, -g))
    if isinstance(a, Tensor):
        return add(a, -b)
    return add(neg(b), a)


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    if not isinstance(a, Tensor):
        a, b = b, a
    if isinstance(b, Tensor):
        ad, bd = a.data, b.data
        return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad))
    s = a.dtype.type(b)
    return _result(a.data * s, (a,), lambda g: (g * s,))


def _relu_backward(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    return g * (x > 0)


def relu(a: Tensor) -> Tensor:
    x = a.data
    return _result(np.maximum(x, 0), (a,), lambda g: (_relu_backward(x, g),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form avoids overflow in exp for large |x|
    half = x.dtype.type(0.5)
    return half * (np.tanh(half * x) + 1)


def _sigmoid_backward(y: np.ndarray, g: np.ndarray) -> np.ndarray:
    return g * y * (1 - y)


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid(a.data)
    return _result(y, (a,), lambda g: (_sigmoid_backward(y, g),))


def abs(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = a.data
    return _result(np.abs(x), (a,), lambda g: (g * np.sign(x),))


def elementwise(op: str, a: Tensor, b=None) -> Tensor:
    """Dispatch by name: add, sub, mul, relu, sigmoid, abs."""
    binary = {"add": add, "sub": sub, "mul": mul}
    unary = {"relu": relu, "sigmoid": sigmoid, "abs": abs}
    if op in binary:
        if b is None:
            raise ValueError(f"{op} needs two operands")
        return binary[op](a, b)
    if op in unary:
        return unary[op](a)
    raise ValueError(f"unknown elementwise op {op!r}")


# ---------------------------------------------------------------------------
# linear algebra and reductions


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("matmul takes rank-2 operands")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"inner extents differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _result(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def _norm_axes(axes, ndim: int) -> tuple:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ValueError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    if len(set(out)) != len(out):
        raise ValueError(f"repeated axis in {axes}")
    return tuple(sorted(out))


def _expand_grad(g: np.ndarray, shape: tuple, axes: tuple, keepdims: bool) -> np.ndarray:
    if not keepdims:
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def sum(a: Tensor, axes=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axes(axes, a.ndim)
    out = np.sum(a.data, axis=axes, dtype=np.float64, keepdims=keepdims).astype(a.dtype)
    shape, dt = a.shape, a.dtype

    def bw(g):
        return (np.array(_expand_grad(g, shape, axes, keepdims), dtype=dt),)

    return _result(out, (a,), bw)


def mean(a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axes, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    if count == 0:
        raise ValueError("mean over an empty extent")
    out = (np.sum(a.data, axis=axes, dtype=np.float64, keepdims=keepdims) / count).astype(a.dtype)
    shape, dt = a.shape, a.dtype

    def bw(g):
        return (np.array(_expand_grad(g, shape, axes, keepdims) / count, dtype=dt),)

    return _result(out, (a,), bw)


def reduce(op: str, a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    if op == "sum":
        return sum(a, axes, keepdims)
    if op == "mean":
        return mean(a, axes, keepdims)
    raise ValueError(f"unknown reduction {op!r}")


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(np.ascontiguousarray(a.data.transpose(axes)), (a,), lambda g: (g.transpose(inverse),))


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ValueError("transpose takes a rank-2 tensor")
    return permute(a, (1, 0))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ValueError("concat of nothing")
    axis = axis % tensors[0].ndim
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def bw(g):
        idx = [slice(None)] * g.ndim
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[axis] = slice(lo, hi)
            out.append(g[tuple(idx)])
        return tuple(out)

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def bias_add(a: Tensor, bias: Tensor, axis: int = 1) -> Tensor:
    """Add a 1-D ``bias`` along ``axis`` of ``a`` (the only broadcast we allow)."""
    axis = axis % a.ndim
    if bias.ndim != 1 or bias.shape[0] != a.shape[axis]:
        raise ValueError(f"bias of shape {bias.shape} does not fit axis {axis} of {a.shape}")
    view = [1] * a.ndim
    view[axis] = -1
    others = tuple(i for i in range(a.ndim) if i != axis)

    def bw(g):
        gb = np.sum(g, axis=others, dtype=np.float64).astype(bias.dtype)
        return g, gb

    return _result(a.data + bias.data.reshape(view), (a, bias), bw)


# ---------------------------------------------------------------------------
# patch flattening (im2col) for convolution


def _conv_geometry(spatial: tuple, kernel: tuple, stride: tuple, padding: tuple) -> tuple:
    out = []
    for n, k, s, p in zip(spatial, kernel, stride, padding):
        o = (n + 2 * p - k) // s + 1
        if o < 1:
            raise ValueError(
                f"convolution output extent < 1 (input {spatial}, kernel {kernel}, "
                f"stride {stride}, padding {padding})"
            )
        out.append(o)
    return tuple(out)


def unfold(a: Tensor, kernel: Sequence[int], stride: Sequence[int], padding: Sequence[int]) -> Tensor:
    """Flatten sliding patches of a ``(B, C, *spatial)`` tensor.

    Returns a ``(C * prod(kernel), B * prod(out_spatial))`` matrix whose rows
    are ordered (channel, kernel offsets) and columns (batch, output position),
    so a convolution becomes ``weights.reshape(O, -1) @ cols``.
    """
    kernel, stride, padding = tuple(kernel), tuple(stride), tuple(padding)
    nsp = len(kernel)
    if a.ndim != nsp + 2:
        raise ValueError(f"unfold over {nsp} spatial axes needs rank {nsp + 2}, got {a.shape}")
    B, C = a.shape[:2]
    spatial = a.shape[2:]
    out_sp = _conv_geometry(spatial, kernel, stride, padding)

    pad = [(0, 0), (0, 0)] + [(p, p) for p in padding]
    xp = np.pad(a.data, pad) if any(padding) else a.data
    sp_axes = tuple(range(2, 2 + nsp))
    win = np.lib.stride_tricks.sliding_window_view(xp, kernel, axis=sp_axes)
    win = win[(slice(None), slice(None)) + tuple(slice(None, None, s) for s in stride)]
    win = win[(slice(None), slice(None)) + tuple(slice(0, o) for o in out_sp)]
    # (B, C, *out, *k) -> (C, *k, B, *out)
    order = (1,) + tuple(range(2 + nsp, 2 + 2 * nsp)) + (0,) + sp_axes
    cols = np.ascontiguousarray(win.transpose(order)).reshape(C * int(np.prod(kernel)), -1)

    padded_shape = xp.shape

    def bw(g):
        # (C, *k, B, *out) -> (*k, B, C, *out), one copy up front
        gk = g.reshape((C,) + kernel + (B,) + out_sp)
        gk = np.ascontiguousarray(
            gk.transpose(tuple(range(1, 1 + nsp)) + (1 + nsp, 0) + tuple(range(2 + nsp, 2 + 2 * nsp)))
        )
        gx = np.zeros(padded_shape, dtype=g.dtype)
        for offs in itertools.product(*(range(k) for k in kernel)):
            dst = (slice(None), slice(None)) + tuple(
                slice(o, o + s * (n - 1) + 1, s) for o, s, n in zip(offs, stride, out_sp)
            )
            gx[dst] += gk[offs]
        if any(padding):
            gx = gx[(slice(None), slice(None)) + tuple(slice(p, p + n) for p, n in zip(padding, spatial))]
        return (np.ascontiguousarray(gx),)

    return _result(cols, (a,), bw)
