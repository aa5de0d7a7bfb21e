"""
Small float64 tensor engine with an explicit reverse-mode tape.

Every op is a plain function taking and returning :class:`Tensor`.  When at
least one input has ``requires_grad`` and a :class:`Tape` is active, the op
appends a node ``(output, inputs, vjp)`` to that tape.  Because nodes are
appended as they are computed, the tape is already in topological order and
``Tape.backward`` is a single reverse sweep.

    with Tape() as tape:
        loss = tsum(x * x)
    (gx,) = tape.backward(loss, [x])

Outside a tape, ops simply compute values (evaluation mode).
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NumericError, ShapeError

_state = threading.local()


def _active_tape():
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    """n-dimensional float64 array that may participate in a tape."""

    __slots__ = ("data", "requires_grad", "grad")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if any(d <= 0 for d in arr.shape):
            raise ShapeError(f"tensor: dimensions must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __len__(self):
        return self.shape[0]

    # operators delegate to the functional ops below
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _not_scalar(t):
    raise ShapeError(f"item: expected a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor._wrap(np.asarray(x, dtype=np.float64))


@dataclass
class _Node:
    out: Tensor
    inputs: tuple
    vjp: Callable


@dataclass
class Tape:
    """Ordered record of differentiable ops; use as a context manager."""

    nodes: list = field(default_factory=list)

    def __enter__(self):
        if not hasattr(_state, "stack"):
            _state.stack = []
        _state.stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.stack.pop()
        return False

    def record(self, out: Tensor, inputs: tuple, vjp: Callable) -> None:
        self.nodes.append(_Node(out, inputs, vjp))

    def backward(self, loss: Tensor, params: Sequence[Tensor] | None = None):
        """Reverse sweep from a scalar ``loss``.

        Sets ``.grad`` on every leaf that requires grad and was reached.  When
        ``params`` is given, returns their gradients in order, using zeros for
        tensors with no path to ``loss``.
        """
        if loss.data.size != 1:
            raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
        grads = {id(loss): np.ones_like(loss.data)}
        produced = set()
        for node in reversed(self.nodes):
            produced.add(id(node.out))
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            in_grads = node.vjp(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        leaves = {}
        for node in self.nodes:
            for t in node.inputs:
                if t.requires_grad and id(t) not in produced:
                    leaves[id(t)] = t
        for key, t in leaves.items():
            t.grad = grads.get(key, np.zeros_like(t.data))
        if params is None:
            return None
        out = []
        for p in params:
            g = grads.get(id(p))
            out.append(np.zeros_like(p.data) if g is None else g)
        return out


def _result(arr: np.ndarray, inputs: tuple, vjp: Callable) -> Tensor:
    out = Tensor._wrap(arr)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, inputs, vjp)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, d in enumerate(shape):
        if d == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_check(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("add", a, b)
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("sub", a, b)
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("mul", a, b)
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape),
                              _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("div", a, b)
    out = a.data / b.data
    return _result(out, (a, b),
                   lambda g: (_unbroadcast(g / b.data, a.shape),
                              _unbroadcast(-g * out / b.data, b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    return _result(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (g * 0.5 / out,))


def tabs(a) -> Tensor:
    a = as_tensor(a)
    return _result(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),))


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (a,), vjp)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _result(out, (a,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


# ---------------------------------------------------------------- reductions


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.asarray(out), (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size / np.asarray(a.data.sum(axis=axis, keepdims=keepdims)).size
    return tsum(a, axis, keepdims) / count


def tmax(a, axis: int) -> Tensor:
    """Max over a single axis (kept); ties route the gradient to the first index."""
    a = as_tensor(a)
    idx = np.expand_dims(a.data.argmax(axis=axis), axis)
    out = np.take_along_axis(a.data, idx, axis=axis)

    def vjp(g):
        grad = np.zeros_like(a.data)
        np.put_along_axis(grad, idx, g, axis=axis)
        return (grad,)

    return _result(out, (a,), vjp)


def l2_norm(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Euclidean norm along ``axis``; the subgradient at the origin is zero."""
    a = as_tensor(a)
    out = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, g * a.data / safe, 0.0),)

    return _result(out if keepdims else np.squeeze(out, axis=axis), (a,), vjp)


def normalize(a, axis: int = -1) -> Tensor:
    """Scale to unit L2 norm along ``axis``; zero vectors are an error."""
    a = as_tensor(a)
    n = l2_norm(a, axis=axis, keepdims=True)
    if np.any(n.data == 0):
        raise NumericError("normalize: zero-norm vector has no direction")
    return a / n


def cosine_similarity(a, b, axis: int = -1) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("cosine_similarity", a, b)
    na = l2_norm(a, axis=axis)
    nb = l2_norm(b, axis=axis)
    if np.any(na.data == 0) or np.any(nb.data == 0):
        raise NumericError("cosine_similarity: zero-norm vector")
    return tsum(a * b, axis=axis) / (na * nb)


# ---------------------------------------------------------------- structural


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {tuple(shape)}") from None
    return _result(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _result(out, (a,), lambda g: (np.transpose(g, inv),))


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    out = a.data[idx]

    def vjp(g):
        grad = np.zeros_like(a.data)
        np.add.at(grad, idx, g)
        return (grad,)

    return _result(np.array(out), (a,), vjp)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _result(out, ts, lambda g: tuple(np.split(g, bounds, axis=axis)))


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.stack([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"stack: incompatible shapes {[t.shape for t in ts]}") from None
    return _result(out, ts,
                   lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(ts))))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = a.data @ b.data

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(out, (a, b), vjp)


# ---------------------------------------------------------------- spatial


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _scatter_windows(dwin: np.ndarray, padded_shape: tuple, stride: int) -> np.ndarray:
    """Adjoint of sliding_window_view + striding: dwin is (N, C, Ho, Wo, kh, kw)."""
    _, _, ho, wo, kh, kw = dwin.shape
    dxp = np.zeros(padded_shape)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * (ho - 1) + 1:stride,
                j:j + stride * (wo - 1) + 1:stride] += dwin[..., i, j]
    return dxp


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation. x: (N, C, H, W), w: (O, C, kh, kw), b: (O,)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(wd, kw, stride, padding)
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d: kernel {w.shape} larger than padded input {x.shape}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    out = np.tensordot(win, w.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    inputs = (x, w)
    if b is not None:
        b = as_tensor(b)
        if b.shape != (o,):
            raise ShapeError(f"conv2d: bias {b.shape} does not match {o} output channels")
        out = out + b.data[None, :, None, None]
        inputs = (x, w, b)

    def vjp(g):
        gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
        gx = None
        if x.requires_grad:
            dwin = np.tensordot(g, w.data, axes=([1], [0])).transpose(0, 3, 1, 2, 4, 5)
            dxp = _scatter_windows(dwin, xp.shape, stride)
            gx = dxp[:, :, padding:padding + h, padding:padding + wd]
        grads = (gx, gw)
        if b is not None:
            grads = grads + (g.sum(axis=(0, 2, 3)),)
        return grads

    return _result(np.ascontiguousarray(out), inputs, vjp)


def _pool_windows(x: np.ndarray, kernel: int, stride: int, padding: int,
                  ceil_mode: bool, fill: float):
    n, c, h, w = x.shape

    def out_size(size):
        span = size + 2 * padding - kernel
        if ceil_mode:
            o = -(-span // stride) + 1
            # the last window must start inside the input or left padding
            if (o - 1) * stride >= size + padding:
                o -= 1
            return o
        return span // stride + 1

    ho, wo = out_size(h), out_size(w)
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"pool: kernel {kernel} larger than input {x.shape}")
    extra_h = max(0, (ho - 1) * stride + kernel - (h + 2 * padding))
    extra_w = max(0, (wo - 1) * stride + kernel - (w + 2 * padding))
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding + extra_h), (padding, padding + extra_w)),
                constant_values=fill)
    win = sliding_window_view(xp, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    return xp, win


def max_pool2d(x, kernel: int, stride: int | None = None, padding: int = 0,
               ceil_mode: bool = False) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"max_pool2d: expected (N, C, H, W), got {x.shape}")
    stride = stride or kernel
    xp, win = _pool_windows(x.data, kernel, stride, padding, ceil_mode, -np.inf)
    n, c, ho, wo = win.shape[:4]
    flat = win.reshape(n, c, ho, wo, kernel * kernel)
    arg = flat.argmax(axis=-1)[..., None]
    out = np.take_along_axis(flat, arg, axis=-1)[..., 0]
    h, w = x.shape[2:]

    def vjp(g):
        dflat = np.zeros((n, c, ho, wo, kernel * kernel))
        np.put_along_axis(dflat, arg, g[..., None], axis=-1)
        dxp = _scatter_windows(dflat.reshape(n, c, ho, wo, kernel, kernel), xp.shape, stride)
        return (dxp[:, :, padding:padding + h, padding:padding + w],)

    return _result(out, (x,), vjp)


def avg_pool2d(x, kernel: int, stride: int | None = None, padding: int = 0) -> Tensor:
    """Average pooling; zero padding counts toward the window size."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"avg_pool2d: expected (N, C, H, W), got {x.shape}")
    stride = stride or kernel
    xp, win = _pool_windows(x.data, kernel, stride, padding, False, 0.0)
    out = win.mean(axis=(-1, -2))
    h, w = x.shape[2:]

    def vjp(g):
        dwin = np.broadcast_to(g[..., None, None] / (kernel * kernel), win.shape)
        dxp = _scatter_windows(dwin, xp.shape, stride)
        return (dxp[:, :, padding:padding + h, padding:padding + w],)

    return _result(out, (x,), vjp)


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-6
    lr: float = 0.001

    @classmethod
    def init(cls, params: Sequence[Tensor], lr: float = 0.001, beta1: float = 0.9,
             beta2: float = 0.999, eps: float = 1e-6) -> "AdamState":
        return cls(m=[np.zeros_like(p.data) for p in params],
                   v=[np.zeros_like(p.data) for p in params],
                   t=0, beta1=beta1, beta2=beta2, eps=eps, lr=lr)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState,
              lr: float | None = None) -> AdamState:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError(f"adam_step: {len(params)} params, {len(grads)} grads, "
                         f"{len(state.m)} state slots")
    lr = state.lr if lr is None else lr
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise ShapeError(f"adam_step: gradient {g.shape} does not match parameter {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


def lr_schedule(base_lr: float, epoch: int, decay: float = 0.9, every: int = 5) -> float:
    """Step-wise exponential decay: ``base_lr * decay ** (epoch // every)``."""
    if epoch < 0:
        raise ValueError(f"lr_schedule: epoch must be >= 0, got {epoch}")
    return base_lr * decay ** (epoch // every)


# ---------------------------------------------------------------- init


def kaiming_uniform(rng: np.random.Generator, shape: tuple, fan_in: int) -> Tensor:
    bound = math.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def fan_in_uniform(rng: np.random.Generator, shape: tuple, fan_in: int) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def zeros(shape: tuple, requires_grad: bool = True) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)
