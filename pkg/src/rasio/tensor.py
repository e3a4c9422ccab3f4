"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every differentiable quantity of the estimator lives in a :class:`Tensor`.
Operations record a node on the tape when any input requires a gradient;
:func:`backward` walks the tape once in reverse topological order.

Binary operations follow numpy broadcasting; gradients are summed back over
broadcast axes.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Graph", "ShapeError", "no_grad", "is_grad_enabled", "tensor",
    "elementwise", "add", "sub", "mul", "div", "neg", "square", "sqrt", "exp",
    "log", "relu", "tanh", "softplus", "sin", "cos", "matmul", "softmax",
    "softmax_array", "conv2d", "resize_bilinear", "bilinear_matrix", "concat",
    "stack", "build_graph", "backward", "adam_step", "Adam", "AdamState",
]

CHECK_FINITE = True
# per thread, so no_grad blocks in odometry workers cannot leak into the caller
_grad_state = threading.local()


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    prev = is_grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = prev


def is_grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


def _check(data: np.ndarray, op: str) -> None:
    if CHECK_FINITE and not np.isfinite(data).all():
        raise FloatingPointError(f"non-finite value produced by '{op}'")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "__weakref__")

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    # -- introspection ----------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=6, threshold=20)}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        backward(self)

    # -- operators ----------------------------------------------------------
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __pow__(self, p):
        if p == 2:
            return square(self)
        if p == 0.5:
            return sqrt(self)
        raise ValueError("only powers 2 and 0.5 are supported")

    def __getitem__(self, idx):
        return _getitem(self, idx)

    # -- reductions / views -------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return _sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        n = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return _sum(self, axis, keepdims) * (1.0 / float(n))

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return _transpose(self, axes or None)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: tuple, backward_fn: Callable, op: str) -> Tensor:
    _check(data, op)
    out = Tensor(data)
    out.op = op
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


# -- elementwise ------------------------------------------------------------

def _binary_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not compatible") from None


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shape(a, b, "add")
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shape(a, b, "sub")
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shape(a, b, "mul")
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None),
                 "mul")


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shape(a, b, "div")
    if np.any(b.data == 0.0):
        raise ZeroDivisionError("tensor division by zero")
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(out, (a, b), bw, "div")


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def square(a) -> Tensor:
    a = _as_tensor(a)
    return _node(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,), "square")


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data < 0):
        raise ValueError("sqrt of negative value")
    out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: (0.5 * g / out,), "sqrt")


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data <= 0):
        raise ValueError("log of non-positive value")
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def softplus(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    sig = 0.5 * (1.0 + np.tanh(0.5 * x))
    return _node(out, (a,), lambda g: (g * sig,), "softplus")


def sin(a) -> Tensor:
    a = _as_tensor(a)
    return _node(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),), "sin")


def cos(a) -> Tensor:
    a = _as_tensor(a)
    return _node(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),), "cos")


_UNARY = {"neg": neg, "square": square, "sqrt": sqrt, "exp": exp, "relu": relu}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(op: str, a, b=None) -> Tensor:
    """Dispatch one of add, sub, mul, div, neg, square, sqrt, exp, relu by name."""
    if op in _BINARY:
        if b is None:
            raise ValueError(f"{op} needs two operands")
        return _BINARY[op](a, b)
    if op in _UNARY:
        return _UNARY[op](a)
    raise ValueError(f"unknown elementwise op {op!r}")


# -- structural -------------------------------------------------------------

def _sum(a: Tensor, axis, keepdims: bool) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(np.asarray(out), (a,), bw, "sum")


def _reshape(a: Tensor, shape) -> Tensor:
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def _transpose(a: Tensor, axes) -> Tensor:
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _node(out, (a,), lambda g: (np.transpose(g, inv),), "transpose")


def _getitem(a: Tensor, idx) -> Tensor:
    if isinstance(idx, Tensor):
        raise TypeError("index with numpy arrays, not tensors")
    out = a.data[idx]
    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(p is None or p is Ellipsis or isinstance(p, (slice, int, np.integer)) for p in parts)

    def bw(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] = g  # views never overlap
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _node(np.array(out, copy=True), (a,), bw, "getitem")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(out, tuple(ts), bw, "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in ts], axis=axis)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return _node(out, tuple(ts), bw, "stack")


# -- linear algebra -----------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product for 1-D/2-D operands and batched stacks of equal batch shape."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim == 0 or b.ndim == 0:
        raise ShapeError("matmul operands must be at least 1-D")
    ka = a.shape[-1]
    kb = b.shape[0] if b.ndim == 1 else b.shape[-2]
    if ka != kb:
        raise ShapeError(f"matmul: inner dimensions differ ({a.shape} @ {b.shape})")
    out = np.matmul(a.data, b.data)

    def bw(g):
        A, B = a.data, b.data
        if a.ndim == 1 and b.ndim == 1:
            return g * B, g * A
        if b.ndim == 1:
            ga = np.multiply.outer(g, B) if a.requires_grad else None
            gb = np.tensordot(A, g, axes=(list(range(A.ndim - 1)), list(range(g.ndim)))) if b.requires_grad else None
            return ga, gb
        if a.ndim == 1:
            ga = np.matmul(B, g[..., None])[..., 0] if a.requires_grad else None
            gb = np.multiply.outer(A, g) if b.requires_grad else None
            return ga, gb
        ga = np.matmul(g, np.swapaxes(B, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(A, -1, -2), g) if b.requires_grad else None
        if ga is not None:
            ga = _unbroadcast(ga, a.shape)
        if gb is not None:
            gb = _unbroadcast(gb, b.shape)
        return ga, gb

    return _node(out, (a, b), bw, "matmul")


def softmax_array(x: np.ndarray, axis: int = -1, temperature: float = 1.0) -> np.ndarray:
    """Numerically stable tempered softmax on a plain array."""
    if not temperature > 0:
        raise ValueError(f"softmax temperature must be positive, got {temperature}")
    z = np.asarray(x, dtype=np.float64) / temperature
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(x, axis: int = -1, temperature: float = 1.0) -> Tensor:
    """exp(x/κ) normalised along ``axis``; the row maximum is subtracted first."""
    x = _as_tensor(x)
    y = softmax_array(x.data, axis, temperature)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)) / temperature,)

    return _node(y, (x,), bw, "softmax")


def _windows(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    return win[:, : (ho - 1) * stride + 1: stride, : (wo - 1) * stride + 1: stride]


def conv2d(x, kernels, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of a C_in×H×W input with C_out×C_in×k×k kernels."""
    x, w = _as_tensor(x), _as_tensor(kernels)
    if x.ndim != 3 or w.ndim != 4:
        raise ShapeError("conv2d expects input C×H×W and kernels O×C×k×k")
    cout, cin, k, k2 = w.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d kernels must be square with odd size, got {k}×{k2}")
    if cin != x.shape[0]:
        raise ShapeError(f"conv2d channel mismatch: input has {x.shape[0]}, kernels expect {cin}")
    _, h, wd = x.shape
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError("conv2d output would be empty")
    win = _windows(xp, k, stride, ho, wo)  # C, ho, wo, k, k
    cols = win.transpose(1, 2, 0, 3, 4).reshape(ho * wo, cin * k * k)
    wmat = w.data.reshape(cout, -1)
    out = (cols @ wmat.T).T.reshape(cout, ho, wo)

    def bw(g):
        g2 = g.reshape(cout, ho * wo)
        gw = (g2 @ cols).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (wmat.T @ g2).reshape(cin, k, k, ho, wo)
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gxp[:, i: i + (ho - 1) * stride + 1: stride, j: j + (wo - 1) * stride + 1: stride] += dcols[:, i, j]
            gx = gxp[:, padding: padding + h, padding: padding + wd]
        return gx, gw

    return _node(out, (x, w), bw, "conv2d")


def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Interpolation matrix (n_out×n_in) with corner-aligned sample positions."""
    m = np.zeros((n_out, n_in))
    if n_in == 1:
        m[:, 0] = 1.0
        return m
    pos = np.linspace(0.0, n_in - 1, n_out)
    i0 = np.clip(np.floor(pos).astype(int), 0, n_in - 2)
    f = pos - i0
    m[np.arange(n_out), i0] = 1.0 - f
    m[np.arange(n_out), i0 + 1] += f
    return m


def resize_bilinear(x, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize of the last two axes (corner-aligned)."""
    x = _as_tensor(x)
    mh = bilinear_matrix(x.shape[-2], out_h)
    mw = bilinear_matrix(x.shape[-1], out_w)
    out = _separable(x.data, mh, mw)
    return _node(out, (x,), lambda g: (_separable(g, mh.T, mw.T),), "resize_bilinear")


def _separable(x: np.ndarray, mh: np.ndarray, mw: np.ndarray) -> np.ndarray:
    """``mh @ x @ mwᵀ`` over the last two axes using plain 2-D products."""
    lead = x.shape[:-2]
    h, w = x.shape[-2:]
    y = x.reshape(-1, w) @ mw.T  # (..·h, W')
    y = y.reshape(-1, h, mw.shape[0]).transpose(1, 0, 2).reshape(h, -1)
    z = (mh @ y).reshape(mh.shape[0], -1, mw.shape[0]).transpose(1, 0, 2)
    return np.ascontiguousarray(z).reshape(lead + (mh.shape[0], mw.shape[0]))


# -- tape ---------------------------------------------------------------------

@dataclass
class Graph:
    """Nodes reachable from a root, inputs before consumers."""

    nodes: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.nodes)


def build_graph(root: Tensor) -> Graph:
    order: list = []
    seen: set = set()
    stack_: list = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return Graph(order)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(node) into ``.grad`` of every tracked node."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    graph = build_graph(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            pg = np.asarray(pg, dtype=np.float64).reshape(p.shape)
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg


# -- optimisation -----------------------------------------------------------------

@dataclass
class AdamState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], lr: float = 1e-4,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              state: AdamState | None = None) -> tuple[list, AdamState]:
    """One bias-corrected Adam update; returns new parameter arrays and state."""
    if not lr > 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if state is None or not state.m:
        state = AdamState(0, [np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])
    if len(state.m) != len(params) or any(m.shape != p.shape for m, p in zip(state.m, params)):
        raise ShapeError("optimizer state does not match parameters")
    t = state.step + 1
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        mhat = m / (1.0 - beta1 ** t)
        vhat = v / (1.0 - beta2 ** t)
        new_p.append(p - lr * mhat / (np.sqrt(vhat) + eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamState(t, new_m, new_v)


class Adam:
    """Stateful wrapper around :func:`adam_step` for a list of leaf tensors."""

    def __init__(self, params: Iterable[Tensor], lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        if not lr > 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.state = AdamState()

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        new, self.state = adam_step([p.data for p in self.params], grads, self.lr,
                                    self.betas[0], self.betas[1], self.eps, self.state)
        for p, d in zip(self.params, new):
            p.data = d
