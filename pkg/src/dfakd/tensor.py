"""Dense tensors with a reverse-mode differentiation tape.

Every differentiable op executed while grad mode is on (and with at least one
input that requires grad) appends a :class:`Node` to the tape.  Nodes carry a
monotone sequence number, so sorting by it gives a valid topological order
for :func:`backward`.

Two precisions are supported: ``"fp64"`` (reference mode, the default) and
``"fp32"`` (fast mode).  Use :func:`set_precision` or the :func:`precision`
context manager.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Node",
    "ShapeError",
    "NumericOverflowError",
    "TapeError",
    "backward",
    "no_grad",
    "grad_enabled",
    "precision",
    "set_precision",
    "default_dtype",
    "forward_op",
    "OPS",
    "matmul",
    "conv2d",
    "batchnorm2d",
    "relu",
    "clamp_min",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "scale",
    "sqrt",
    "mean",
    "sum",
    "sum_squares",
    "softmax",
    "log_softmax",
    "avgpool",
    "reshape",
    "getitem",
    "parameters_checksum",
]

_DTYPES = {"fp64": np.float64, "fp32": np.float32}


class ShapeError(ValueError):
    """Raised when an op receives operands of incompatible shape."""


class NumericOverflowError(ArithmeticError):
    """Raised when an op produces a non-finite value."""


class TapeError(RuntimeError):
    """Raised on misuse of :func:`backward`."""


class _State(threading.local):
    def __init__(self):
        self.grad_enabled = True
        self.dtype = np.float64


_state = _State()
_seq = itertools.count()


def default_dtype():
    return _state.dtype


def set_precision(mode: str) -> None:
    if mode not in _DTYPES:
        raise ValueError(f"unknown precision {mode!r}; expected one of {sorted(_DTYPES)}")
    _state.dtype = _DTYPES[mode]


@contextlib.contextmanager
def precision(mode: str):
    old = _state.dtype
    set_precision(mode)
    try:
        yield
    finally:
        _state.dtype = old


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    old = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = old


def grad_enabled() -> bool:
    return _state.grad_enabled


class Node:
    """One tape entry: the op that produced a tensor and how to differentiate it."""

    __slots__ = ("seq", "op", "inputs", "backward_fn", "pending")

    def __init__(self, op: str, inputs: tuple, backward_fn: Callable):
        self.seq = next(_seq)
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.pending = None

    def __repr__(self):
        return f"Node(seq={self.seq}, op={self.op!r})"


class Tensor:
    """A numpy array plus gradient bookkeeping.

    ``node`` is ``None`` for leaves.  ``grad`` accumulates across calls to
    :func:`backward` until :meth:`zero_grad` is called.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "node", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype or _state.dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self.node: Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __len__(self):
        return len(self.data)

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __truediv__ = lambda self, other: div(self, other)
    __rtruediv__ = lambda self, other: div(other, self)
    __matmul__ = lambda self, other: matmul(self, other)
    __neg__ = lambda self: neg(self)
    __getitem__ = lambda self, index: getitem(self, index)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(op: str, out: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    if not np.all(np.isfinite(out)):
        shapes = ", ".join(str(t.shape) for t in inputs)
        raise NumericOverflowError(f"{op}: non-finite output (input shapes {shapes})")
    result = Tensor(out, dtype=out.dtype)
    if _state.grad_enabled and any(t.requires_grad for t in inputs):
        result.requires_grad = True
        result.node = Node(op, tuple(inputs), backward_fn)
    return result


def _shape_error(op: str, a, b, detail: str = "") -> ShapeError:
    msg = f"{op}: incompatible shapes {tuple(a)} and {tuple(b)}"
    return ShapeError(f"{msg} ({detail})" if detail else msg)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def backward(root: Tensor) -> None:
    """Populate ``.grad`` of every leaf reachable from scalar ``root``."""
    if root.data.size != 1:
        raise TapeError(f"backward: root must be a scalar, got shape {root.shape}")
    if root.node is None:
        raise TapeError("backward: root was not produced on the tape (no input requires grad)")

    nodes: dict[int, Node] = {}
    stack = [root.node]
    while stack:
        node = stack.pop()
        if node.seq in nodes:
            continue
        nodes[node.seq] = node
        for t in node.inputs:
            if t.node is not None and t.node.seq not in nodes:
                stack.append(t.node)

    root.node.pending = np.ones_like(root.data)
    for seq in sorted(nodes, reverse=True):
        node = nodes[seq]
        g = node.pending
        node.pending = None
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.backward_fn(g)):
            if gi is None or not t.requires_grad:
                continue
            if t.node is not None:
                t.node.pending = gi if t.node.pending is None else t.node.pending + gi
            else:
                gi = np.asarray(gi, dtype=t.data.dtype).reshape(t.shape)
                t.grad = gi.copy() if t.grad is None else t.grad + gi


# ---------------------------------------------------------------- elementwise


def _binary_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise _shape_error(op, a.shape, b.shape, "not broadcastable") from None


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shape("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record("add", a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shape("sub", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record("sub", a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shape("mul", a, b)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _record("mul", a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shape("div", a, b)
    if np.any(b.data == 0):
        raise NumericOverflowError("div: division by zero")
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _record("div", out, (a, b), bw)


def neg(x) -> Tensor:
    x = _as_tensor(x)
    return _record("neg", -x.data, (x,), lambda g: (-g,))


def scale(x, factor: float) -> Tensor:
    x = _as_tensor(x)
    factor = float(factor)
    return _record("scale", x.data * factor, (x,), lambda g: (g * factor,))


def sqrt(x) -> Tensor:
    x = _as_tensor(x)
    if np.any(x.data <= 0):
        raise NumericOverflowError("sqrt: non-positive input")
    out = np.sqrt(x.data)
    return _record("sqrt", out, (x,), lambda g: (g * 0.5 / out,))


def relu(x) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0
    return _record("relu", np.where(mask, x.data, 0.0).astype(x.dtype), (x,), lambda g: (g * mask,))


def clamp_min(x, threshold: float) -> Tensor:
    """Elementwise ``max(x, threshold)``; values at or above ``threshold`` pass unchanged."""
    x = _as_tensor(x)
    t = x.dtype.type(threshold)
    keep = x.data >= t
    out = np.where(keep, x.data, t)
    return _record("clamp_min", out, (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------- reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = _as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape),)

    return _record("sum", np.asarray(out), (x,), bw)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    out = x.data.mean(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.shape),)

    return _record("mean", np.asarray(out), (x,), bw)


def sum_squares(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    out = np.square(x.data).sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (2.0 * g * x.data,)

    return _record("sum_squares", np.asarray(out), (x,), bw)


def softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _record("softmax", out, (x,), bw)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _record("log_softmax", out, (x,), bw)


# ---------------------------------------------------------------- shape ops


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise _shape_error("reshape", x.shape, shape, "element counts differ") from None
    return _record("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def getitem(x, index) -> Tensor:
    x = _as_tensor(x)
    out = x.data[index]

    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _record("getitem", np.array(out), (x,), bw)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise _shape_error("matmul", a.shape, b.shape, "expected (m, k) @ (k, n)")

    def bw(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _record("matmul", a.data @ b.data, (a, b), bw)


def _conv_padding(padding, kh: int, kw: int) -> tuple[int, int]:
    if padding == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise ValueError("conv2d: 'same' padding needs odd kernel sizes")
        return kh // 2, kw // 2
    if padding == "valid":
        return 0, 0
    p = int(padding)
    return p, p


def conv2d(x, weight, stride: int = 1, padding="same") -> Tensor:
    """2-D cross-correlation, NCHW input and (out, in, kh, kw) weight, no bias.

    ``padding`` is ``"same"`` (k // 2 zeros per side), ``"valid"``, or an int.
    """
    x, weight = _as_tensor(x), _as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise _shape_error("conv2d", x.shape, weight.shape, "expected NCHW input and OCkk weight with equal C")
    n, c, h, w = x.shape
    o, _, kh, kw = weight.shape
    ph, pw = _conv_padding(padding, kh, kw)
    ho = (h + 2 * ph - kh) // stride + 1
    wo = (w + 2 * pw - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise _shape_error("conv2d", x.shape, weight.shape, "kernel larger than padded input")

    if kh == 1 and kw == 1 and ph == 0 and pw == 0:
        xs = x.data[:, :, ::stride, ::stride]
        w2 = weight.data[:, :, 0, 0]
        out = np.einsum("nchw,oc->nohw", xs, w2, optimize=True)

        def bw(g):
            gx = gw = None
            if x.requires_grad:
                gx = np.zeros_like(x.data)
                gx[:, :, ::stride, ::stride] = np.einsum("nohw,oc->nchw", g, w2, optimize=True)
            if weight.requires_grad:
                gw = np.einsum("nohw,nchw->oc", g, xs, optimize=True)[:, :, None, None]
            return gx, gw

        return _record("conv2d", out, (x, weight), bw)

    # im2col in channels-last order: cols[n, y, x, i, j, c] = xpad[n, c, y*s + i, x*s + j]
    xh = np.zeros((n, h + 2 * ph, w + 2 * pw, c), dtype=x.dtype)
    xh[:, ph : ph + h, pw : pw + w, :] = x.data.transpose(0, 2, 3, 1)
    cols = np.empty((n, ho, wo, kh, kw, c), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xh[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :]
    cols = cols.reshape(n * ho * wo, kh * kw * c)
    wmat = weight.data.transpose(0, 2, 3, 1).reshape(o, kh * kw * c)
    out = (cols @ wmat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        gw = None
        if weight.requires_grad:
            gw = (g2.T @ cols).reshape(o, kh, kw, c).transpose(0, 3, 1, 2)
        gx = None
        if x.requires_grad:
            gcols = (g2 @ wmat).reshape(n, ho, wo, kh, kw, c)
            gxh = np.zeros_like(xh)
            for i in range(kh):
                for j in range(kw):
                    gxh[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += gcols[:, :, :, i, j, :]
            gx = gxh[:, ph : ph + h, pw : pw + w, :].transpose(0, 3, 1, 2)
        return gx, gw

    return _record("conv2d", np.ascontiguousarray(out), (x, weight), bw)


def batchnorm2d(
    x,
    gamma,
    beta,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
    update_stats: bool | None = None,
) -> Tensor:
    """Per-channel batch normalization of an NCHW tensor.

    With ``training`` the batch statistics normalize the input; the running
    buffers are updated in place only when ``update_stats`` (default: equal to
    ``training``) is true.  Running variance uses the unbiased estimate.
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    if x.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise _shape_error("batchnorm2d", x.shape, gamma.shape, "expected NCHW input and per-channel affine")
    if update_stats is None:
        update_stats = training
    axes = (0, 2, 3)
    g_ = gamma.data[None, :, None, None]
    if training:
        count = x.shape[0] * x.shape[2] * x.shape[3]
        mu = x.data.mean(axis=axes, keepdims=True)
        xc = x.data - mu
        var = np.square(xc).mean(axis=axes, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        if update_stats:
            unbiased = var.reshape(-1) * (count / max(count - 1, 1))
            running_mean *= 1 - momentum
            running_mean += momentum * mu.reshape(-1)
            running_var *= 1 - momentum
            running_var += momentum * unbiased

        def bw(g):
            ggamma = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
            gbeta = g.sum(axis=axes) if beta.requires_grad else None
            gx = None
            if x.requires_grad:
                gxhat = g * g_
                gx = inv * (
                    gxhat
                    - gxhat.mean(axis=axes, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=axes, keepdims=True)
                )
            return gx, ggamma, gbeta

    else:
        inv = 1.0 / np.sqrt(running_var[None, :, None, None] + eps)
        xhat = (x.data - running_mean[None, :, None, None]) * inv

        def bw(g):
            ggamma = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
            gbeta = g.sum(axis=axes) if beta.requires_grad else None
            gx = g * g_ * inv if x.requires_grad else None
            return gx, ggamma, gbeta

    out = (xhat * g_ + beta.data[None, :, None, None]).astype(x.dtype, copy=False)
    return _record("batchnorm2d", out, (x, gamma, beta), bw)


def avgpool(x, kernel: int | None = None) -> Tensor:
    """Average pooling of NCHW input.

    ``kernel=None`` pools globally and returns shape (N, C); otherwise a
    non-overlapping ``kernel`` x ``kernel`` window with stride ``kernel``.
    """
    x = _as_tensor(x)
    if x.ndim != 4:
        raise _shape_error("avgpool", x.shape, (), "expected NCHW input")
    n, c, h, w = x.shape
    if kernel is None:
        out = x.data.mean(axis=(2, 3))
        return _record(
            "avgpool", out, (x,), lambda g: (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape),)
        )
    k = int(kernel)
    if h % k or w % k:
        raise _shape_error("avgpool", x.shape, (k, k), "spatial size not divisible by kernel")
    out = x.data.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))

    def bw(g):
        return (np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k),)

    return _record("avgpool", out, (x,), bw)


OPS: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "conv2d": conv2d,
    "batchnorm2d": batchnorm2d,
    "relu": relu,
    "clamp_min": clamp_min,
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "neg": neg,
    "scale": scale,
    "sqrt": sqrt,
    "mean": mean,
    "sum": sum,
    "sum_squares": sum_squares,
    "softmax": softmax,
    "log_softmax": log_softmax,
    "avgpool": avgpool,
    "reshape": reshape,
    "getitem": getitem,
}


def forward_op(op: str, *inputs, **attrs) -> Tensor:
    """Dispatch ``op`` by name, e.g. ``forward_op("clamp_min", x, threshold=-1)``."""
    try:
        fn = OPS[op]
    except KeyError:
        raise ValueError(f"unknown op {op!r}") from None
    return fn(*inputs, **attrs)


def parameters_checksum(tensors: Iterable) -> str:
    """Hex digest over the raw bytes of tensors or arrays, in order."""
    import hashlib

    h = hashlib.sha256()
    for t in tensors:
        arr = t.data if isinstance(t, Tensor) else np.asarray(t)
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()
