"""Dense tensors with reverse-mode automatic differentiation.

Storage is a numpy array.  Every operation whose inputs require gradients
records its parents and a backward closure; :func:`backward` walks the
recorded graph once in reverse topological order.

Binary elementwise operations require equal shapes.  The only implicit
broadcast is against a Python scalar.  Bias additions go through
:func:`linear`, :func:`conv2d` and :func:`conv_transpose2d`, which own their
broadcasting.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_DTYPES = {"f32": np.float32, "f64": np.float64}
_state = {"dtype": np.float32}
_local = threading.local()


class ShapeError(ValueError):
    pass


def set_float_mode(mode: str) -> None:
    """Switch the default storage type: ``"f32"`` (default) or ``"f64"``."""
    if mode not in _DTYPES:
        raise ValueError(f"float mode must be one of {sorted(_DTYPES)}, got {mode!r}")
    _state["dtype"] = _DTYPES[mode]


def get_float_mode() -> str:
    return "f64" if _state["dtype"] is np.float64 else "f32"


def default_dtype():
    return _state["dtype"]


@contextlib.contextmanager
def float_mode(mode: str):
    prev = get_float_mode()
    set_float_mode(mode)
    try:
        yield
    finally:
        set_float_mode(prev)


def is_grad_enabled() -> bool:
    return getattr(_local, "enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = is_grad_enabled()
    _local.enabled = False
    try:
        yield
    finally:
        _local.enabled = prev


@contextlib.contextmanager
def enable_grad():
    prev = is_grad_enabled()
    _local.enabled = True
    try:
        yield
    finally:
        _local.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype or _state["dtype"])
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    # -- construction helpers ------------------------------------------------
    @staticmethod
    def _result(data: np.ndarray, parents: Sequence["Tensor"], backward: Callable, op: str) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.op = op
        if is_grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

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

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self.shape)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def requires_grad_(self, flag: bool = True) -> "Tensor":
        self.requires_grad = flag
        return self

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{rg})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators -----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _raise_item(shape):
    raise ValueError(f"item() needs a single-element tensor, got shape {shape}")


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_state["dtype"]), requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=_state["dtype"]), requires_grad)


def zeros_like(x: Tensor) -> Tensor:
    return Tensor(np.zeros_like(x.data))


def ones_like(x: Tensor) -> Tensor:
    return Tensor(np.ones_like(x.data))


# ---------------------------------------------------------------------------
# Elementwise
# ---------------------------------------------------------------------------

def _check_same(x: Tensor, y: Tensor, op: str) -> None:
    if x.shape != y.shape:
        raise ShapeError(f"{op}: shape mismatch {x.shape} vs {y.shape}")


def _is_scalar(v) -> bool:
    return isinstance(v, (int, float, np.integer, np.floating)) and not isinstance(v, bool)


def add(x: Tensor, y) -> Tensor:
    if _is_scalar(y):
        return Tensor._result(x.data + x.data.dtype.type(y), (x,), lambda g: (g,), "add_scalar")
    _check_same(x, y, "add")
    return Tensor._result(x.data + y.data, (x, y), lambda g: (g, g), "add")


def sub(x: Tensor, y) -> Tensor:
    if _is_scalar(y):
        return add(x, -y)
    _check_same(x, y, "sub")
    return Tensor._result(x.data - y.data, (x, y), lambda g: (g, -g), "sub")


def neg(x: Tensor) -> Tensor:
    return Tensor._result(-x.data, (x,), lambda g: (-g,), "neg")


def mul(x: Tensor, y) -> Tensor:
    if _is_scalar(y):
        c = x.data.dtype.type(y)
        return Tensor._result(x.data * c, (x,), lambda g: (g * c,), "mul_scalar")
    _check_same(x, y, "mul")
    xd, yd = x.data, y.data
    return Tensor._result(xd * yd, (x, y), lambda g: (g * yd, g * xd), "mul")


def div(x: Tensor, y) -> Tensor:
    if _is_scalar(y):
        return mul(x, 1.0 / y)
    _check_same(x, y, "div")
    xd, yd = x.data, y.data
    return Tensor._result(xd / yd, (x, y), lambda g: (g / yd, -g * xd / (yd * yd)), "div")


def _unary(x: Tensor, value: np.ndarray, dfdx: Callable[[], np.ndarray], op: str) -> Tensor:
    return Tensor._result(value, (x,), lambda g: (g * dfdx(),), op)


def exp(x: Tensor) -> Tensor:
    v = np.exp(x.data)
    return _unary(x, v, lambda: v, "exp")


def log(x: Tensor) -> Tensor:
    return _unary(x, np.log(x.data), lambda: 1.0 / x.data, "log")


def sin(x: Tensor) -> Tensor:
    return _unary(x, np.sin(x.data), lambda: np.cos(x.data), "sin")


def cos(x: Tensor) -> Tensor:
    return _unary(x, np.cos(x.data), lambda: -np.sin(x.data), "cos")


def tanh(x: Tensor) -> Tensor:
    v = np.tanh(x.data)
    return _unary(x, v, lambda: 1.0 - v * v, "tanh")


def relu(x: Tensor) -> Tensor:
    # derivative at 0 is 0
    pos = x.data > 0
    return _unary(x, np.where(pos, x.data, 0).astype(x.dtype), lambda: pos.astype(x.dtype), "relu")


def sigmoid(x: Tensor) -> Tensor:
    v = (0.5 * (1.0 + np.tanh(0.5 * x.data))).astype(x.dtype)
    return _unary(x, v, lambda: v * (1.0 - v), "sigmoid")


def absolute(x: Tensor) -> Tensor:
    return _unary(x, np.abs(x.data), lambda: np.sign(x.data), "abs")


def square(x: Tensor) -> Tensor:
    return _unary(x, x.data * x.data, lambda: 2.0 * x.data, "square")


def clamp_to(x: Tensor, lo, hi) -> Tensor:
    """Clip into ``[lo, hi]`` (arrays or scalars).

    Gradient is 1 where ``lo <= x <= hi`` and 0 where the clip binds, so
    clipped coordinates behave as constants.
    """
    lo = np.asarray(lo, dtype=x.dtype)
    hi = np.asarray(hi, dtype=x.dtype)
    inside = (x.data >= lo) & (x.data <= hi)
    return _unary(x, np.clip(x.data, lo, hi), lambda: inside.astype(x.dtype), "clamp")


def where_const(cond: np.ndarray, x: Tensor, other: np.ndarray) -> Tensor:
    """``x`` where ``cond`` else the constant ``other``."""
    cond = np.asarray(cond, dtype=bool)
    if cond.shape != x.shape:
        raise ShapeError(f"where: shape mismatch {cond.shape} vs {x.shape}")
    v = np.where(cond, x.data, np.asarray(other, dtype=x.dtype)).astype(x.dtype)
    return _unary(x, v, lambda: cond.astype(x.dtype), "where")


# ---------------------------------------------------------------------------
# Reductions and shape ops
# ---------------------------------------------------------------------------

def tsum(x: Tensor, axis=None) -> Tensor:
    shape = x.shape

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, shape).astype(x.dtype, copy=True),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).astype(x.dtype, copy=True),)

    return Tensor._result(np.asarray(x.data.sum(axis=axis), dtype=x.dtype), (x,), bw, "sum")


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis), 1.0 / float(n))


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return Tensor._result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    sizes = [t.shape[axis] for t in xs]
    for t in xs[1:]:
        a = list(t.shape)
        b = list(xs[0].shape)
        a[axis] = b[axis] = 0
        if a != b:
            raise ShapeError(f"concat: incompatible shapes {xs[0].shape} vs {t.shape} on axis {axis}")
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._result(np.concatenate([t.data for t in xs], axis=axis), tuple(xs), bw, "concat")


def gather_rows(x: Tensor, idx) -> Tensor:
    """``out[i] = x[i, idx[i]]`` for a rank-2 ``x``."""
    idx = np.asarray(idx, dtype=np.int64)
    if x.ndim != 2 or idx.shape != (x.shape[0],):
        raise ShapeError(f"gather_rows: need (N, K) tensor and N indices, got {x.shape} and {idx.shape}")
    rows = np.arange(x.shape[0])

    def bw(g):
        out = np.zeros_like(x.data)
        out[rows, idx] = g
        return (out,)

    return Tensor._result(x.data[rows, idx], (x,), bw, "gather")


# ---------------------------------------------------------------------------
# Linear algebra / network primitives
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        return (g @ bd.T if a.requires_grad else None, ad.T @ g if b.requires_grad else None)

    return Tensor._result(ad @ bd, (a, b), bw, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` with ``x`` (N, in), ``w`` (in, out), ``b`` (out,)."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {w.shape}")
    xd, wd = x.data, w.data
    out = xd @ wd
    parents = (x, w)
    if b is not None:
        out = out + b.data
        parents = (x, w, b)

    def bw(g):
        gx = g @ wd.T if x.requires_grad else None
        gw = xd.T @ g if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    return Tensor._result(out, parents, bw, "linear")


def _pad(a: np.ndarray, p: int) -> np.ndarray:
    return a if p == 0 else np.pad(a, ((0, 0), (0, 0), (p, p), (p, p)))


def im2col(x: np.ndarray, kernel, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Patch matrix of shape (N*Ho*Wo, C*kh*kw) in row-major patch order."""
    kh, kw = kernel
    win = sliding_window_view(_pad(x, padding), (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = win.shape[:4]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)


def col2im(cols: np.ndarray, x_shape, kernel, out_hw, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add patch rows back into an image."""
    n, c, h, w = x_shape
    kh, kw = kernel
    ho, wo = out_hw
    blocks = np.ascontiguousarray(cols.reshape(n, ho, wo, c, kh, kw).transpose(4, 5, 0, 3, 1, 2))
    gx = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    for p in range(kh):
        for q in range(kw):
            gx[:, :, p:p + stride * (ho - 1) + 1:stride, q:q + stride * (wo - 1) + 1:stride] += blocks[p, q]
    if padding:
        gx = gx[:, :, padding:-padding, padding:-padding]
    return gx


def _conv_out_hw(x_shape, kernel, stride, padding):
    return ((x_shape[2] + 2 * padding - kernel[0]) // stride + 1,
            (x_shape[3] + 2 * padding - kernel[1]) // stride + 1)


def conv2d_forward(x: np.ndarray, w: np.ndarray, stride: int = 1, padding: int = 0):
    """Raw cross-correlation.  Returns (out (N, O, Ho, Wo), patch matrix)."""
    o = w.shape[0]
    ho, wo = _conv_out_hw(x.shape, w.shape[2:], stride, padding)
    cols = im2col(x, w.shape[2:], stride, padding)
    out = cols @ w.reshape(o, -1).T
    return np.ascontiguousarray(out.reshape(x.shape[0], ho, wo, o).transpose(0, 3, 1, 2)), cols


def conv2d_input_grad(g: np.ndarray, w: np.ndarray, x_shape, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Adjoint of :func:`conv2d_forward` with respect to its input."""
    o = w.shape[0]
    g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
    return col2im(g2 @ w.reshape(o, -1), x_shape, w.shape[2:], g.shape[2:], stride, padding)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} does not match weight {w.shape}")
    out, cols = conv2d_forward(x.data, w.data, stride, padding)
    parents = (x, w) if b is None else (x, w, b)
    if b is not None:
        out = out + b.data[None, :, None, None]

    def bw(g):
        o = w.shape[0]
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gx = gw = None
        if x.requires_grad:
            gx = col2im(g2 @ w.data.reshape(o, -1), x.shape, w.shape[2:], g.shape[2:], stride, padding)
        if w.requires_grad:
            gw = (g2.T @ cols).reshape(w.shape)
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return Tensor._result(out, parents, bw, "conv2d")


def conv_transpose2d_forward(x: np.ndarray, w: np.ndarray, stride: int) -> np.ndarray:
    n, _, h, wd = x.shape
    cout, kh, kw = w.shape[1:]
    out = np.zeros((n, cout, (h - 1) * stride + kh, (wd - 1) * stride + kw), dtype=x.dtype)
    for p in range(kh):
        for q in range(kw):
            contrib = np.tensordot(x, w[:, :, p, q], axes=([1], [0]))  # N, H, W, Cout
            out[:, :, p:p + stride * (h - 1) + 1:stride, q:q + stride * (wd - 1) + 1:stride] += \
                contrib.transpose(0, 3, 1, 2)
    return out


def conv_transpose2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 2) -> Tensor:
    """Transposed convolution, weight layout (Cin, Cout, kh, kw), no padding."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"conv_transpose2d: input {x.shape} does not match weight {w.shape}")
    out = conv_transpose2d_forward(x.data, w.data, stride)
    if b is not None:
        out = out + b.data[None, :, None, None]
    parents = (x, w) if b is None else (x, w, b)
    h, wd = x.shape[2:]
    kh, kw = w.shape[2:]

    def bw(g):
        gx = np.zeros_like(x.data) if x.requires_grad else None
        gw = np.zeros_like(w.data) if w.requires_grad else None
        for p in range(kh):
            for q in range(kw):
                gs = g[:, :, p:p + stride * (h - 1) + 1:stride, q:q + stride * (wd - 1) + 1:stride]
                if gx is not None:
                    gx += np.tensordot(gs, w.data[:, :, p, q], axes=([1], [1])).transpose(0, 3, 1, 2)
                if gw is not None:
                    gw[:, :, p, q] = np.tensordot(x.data, gs, axes=([0, 2, 3], [0, 2, 3]))
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return Tensor._result(out, parents, bw, "conv_transpose2d")


def maxpool_argmax(x: np.ndarray, k: int):
    """Return pooled values and a one-hot array marking each window's argmax."""
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ShapeError(f"maxpool2d: spatial dims {(h, w)} not divisible by {k}")
    blocks = x.reshape(n, c, h // k, k, w // k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // k, w // k, k * k)
    arg = blocks.argmax(axis=-1)
    onehot = np.zeros_like(blocks)
    np.put_along_axis(onehot, arg[..., None], 1.0, axis=-1)
    pooled = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    return pooled, onehot


def unpool(g: np.ndarray, onehot: np.ndarray, k: int) -> np.ndarray:
    """Route a pooled-shape array back to the argmax positions."""
    n, c, hp, wp, _ = onehot.shape
    spread = onehot * g[..., None]
    return spread.reshape(n, c, hp, wp, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, hp * k, wp * k)


def maxpool2d(x: Tensor, k: int = 2) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d needs (N, C, H, W), got {x.shape}")
    pooled, onehot = maxpool_argmax(x.data, k)
    return Tensor._result(pooled, (x,), lambda g: (unpool(g, onehot, k),), "maxpool2d")


def log_softmax(x: Tensor, axis: int = 1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    sm = np.exp(out)
    return Tensor._result(out, (x,), lambda g: (g - sm * g.sum(axis=axis, keepdims=True),), "log_softmax")


def softmax(x: Tensor, axis: int = 1) -> Tensor:
    return exp(log_softmax(x, axis))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels``."""
    return neg(mean(gather_rows(log_softmax(logits, 1), labels)))


def softmax_np(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------

class GradTape:
    """Recorded operations reachable from ``root``, parents before children."""

    def __init__(self, root: Tensor):
        self.root = root
        self.nodes: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                self.nodes.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)


def _propagate(loss: Tensor) -> tuple[dict[int, np.ndarray], GradTape]:
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise RuntimeError("backward called on a tensor that was not recorded on a gradient tape "
                           "(no input requires_grad, or computed under no_grad)")
    tape = GradTape(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None) if node._backward is not None else grads.get(id(node))
        if g is None or node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return grads, tape


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Returns the leaf-gradient map.
    """
    grads, tape = _propagate(loss)
    out = {}
    for node in tape.nodes:
        if node.is_leaf and node.requires_grad:
            g = np.asarray(grads.get(id(node), np.zeros_like(node.data)), dtype=node.dtype)
            node.grad = g if node.grad is None else node.grad + g
            out[node] = g
    return out


def grad(loss: Tensor, wrt: Iterable[Tensor]) -> list[np.ndarray]:
    """Gradients of ``loss`` with respect to ``wrt``; zeros for tensors not on the path."""
    grads, _ = _propagate(loss)
    return [np.asarray(grads.get(id(t), np.zeros_like(t.data)), dtype=t.dtype) for t in wrt]
