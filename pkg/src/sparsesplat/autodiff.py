"""Small reverse-mode autodiff over dense float64 arrays.

Operations executed while any input requires grad are appended to the
active :class:`Tape`. ``backward`` walks that tape in reverse and pushes
gradients into leaf tensors. The graph is rebuilt on every forward pass.
"""

from __future__ import annotations

import contextlib
import functools
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "tensor",
    "as_tensor",
    "custom_op",
    "backward",
    "no_grad",
    "active_tape",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "abs_",
    "exp",
    "clamp",
    "reciprocal",
    "sigmoid",
    "leaky_relu",
    "sqdiff",
    "elementwise",
    "reduce",
    "sum_",
    "mean",
    "reshape",
    "index",
    "concat",
    "stack_last",
    "conv2d",
    "upsample_bilinear2x",
    "bilinear_lookup",
]


class Tensor:
    """Dense float64 array node.

    ``grad`` is only populated on leaves (tensors not produced by a recorded op).
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: _Node | None = None

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
    def is_leaf(self) -> bool:
        return self._node is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

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

    def __abs__(self):
        return abs_(self)

    def __getitem__(self, key):
        return index(self, key)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class _Node:
    __slots__ = ("out", "inputs", "backward_fn", "position")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], backward_fn, position: int):
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.position = position


class Tape:
    """Ordered record of executed differentiable ops.

    Use as a context manager to make it the active tape; nested tapes stack.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward_fn) -> None:
        node = _Node(out, inputs, backward_fn, len(self.nodes))
        out._node = node
        self.nodes.append(node)

    def clear(self) -> None:
        for node in self.nodes:
            node.out._node = None
            node.inputs = ()
            node.backward_fn = None
        self.nodes = []

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> Tape:
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPE_STACK.remove(self)


_DEFAULT_TAPE = Tape()
_TAPE_STACK: list[Tape] = [_DEFAULT_TAPE]
_GRAD_ENABLED = [True]


def active_tape() -> Tape:
    return _TAPE_STACK[-1]


@contextlib.contextmanager
def no_grad():
    """Disable recording; ops return detached tensors."""
    _GRAD_ENABLED.append(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.pop()


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def custom_op(
    out_data: np.ndarray,
    inputs: Sequence[Tensor],
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]],
) -> Tensor:
    """Wrap a forward result computed in numpy as a tape node.

    ``backward_fn(g)`` receives the upstream gradient (shape of ``out_data``)
    and returns one gradient (or None) per input, in order.
    """
    inputs = tuple(inputs)
    needs = _GRAD_ENABLED[-1] and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        active_tape().record(out, inputs, backward_fn)
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    if loss._node is None:
        _accumulate(loss, np.ones_like(loss.data))
        return
    tape = None
    for candidate in reversed(_TAPE_STACK):
        pos = loss._node.position
        if pos < len(candidate.nodes) and candidate.nodes[pos] is loss._node:
            tape = candidate
            break
    if tape is None:
        raise RuntimeError("loss is not on an active tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes[: loss._node.position + 1]):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        in_grads = node.backward_fn(g)
        for inp, gi in zip(node.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            if inp._node is None:
                _accumulate(inp, gi)
            else:
                key = id(inp)
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=np.float64)
    if g.shape != t.shape:
        g = g.reshape(t.shape)
    t.grad = g.copy() if t.grad is None else t.grad + g


# ---------------------------------------------------------------- elementwise


def _is_scalar(t: Tensor) -> bool:
    return t.data.size == 1 and t.ndim <= 1


def _binary_shapes(a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def _reduce_to(g: np.ndarray, t: Tensor) -> np.ndarray:
    if g.shape == t.shape:
        return g
    return np.asarray(g.sum()).reshape(t.shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b)
    return custom_op(a.data + b.data, (a, b), lambda g: (_reduce_to(g, a), _reduce_to(g, b)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b)
    return custom_op(a.data - b.data, (a, b), lambda g: (_reduce_to(g, a), _reduce_to(-g, b)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b)
    ad, bd = a.data, b.data
    return custom_op(ad * bd, (a, b), lambda g: (_reduce_to(g * bd, a), _reduce_to(g * ad, b)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return _reduce_to(g / bd, a), _reduce_to(-g * out / bd, b)

    return custom_op(out, (a, b), bw)


def sqdiff(a, b) -> Tensor:
    """(a - b)**2."""
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b)
    d = a.data - b.data

    def bw(g):
        return _reduce_to(2.0 * g * d, a), _reduce_to(-2.0 * g * d, b)

    return custom_op(d * d, (a, b), bw)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return custom_op(-a.data, (a,), lambda g: (-g,))


def abs_(a) -> Tensor:
    a = as_tensor(a)
    s = np.sign(a.data)
    return custom_op(np.abs(a.data), (a,), lambda g: (g * s,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return custom_op(out, (a,), lambda g: (g * out,))


def reciprocal(a) -> Tensor:
    a = as_tensor(a)
    out = 1.0 / a.data
    return custom_op(out, (a,), lambda g: (-g * out * out,))


def clamp(a, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clip to [lo, hi]; gradient is zero where the bound is active."""
    a = as_tensor(a)
    lo_v = -np.inf if lo is None else lo
    hi_v = np.inf if hi is None else hi
    inside = (a.data >= lo_v) & (a.data <= hi_v)
    return custom_op(np.clip(a.data, lo_v, hi_v), (a,), lambda g: (g * inside,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return custom_op(out, (a,), lambda g: (g * out * (1.0 - out),))


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    scale = np.where(pos, 1.0, slope)
    return custom_op(a.data * scale, (a,), lambda g: (g * scale,))


_UNARY = {
    "abs": abs_,
    "exp": exp,
    "reciprocal": reciprocal,
    "neg": neg,
    "sigmoid": sigmoid,
}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div, "sqdiff": sqdiff}


def elementwise(op_kind: str, a, b=None, **kwargs) -> Tensor:
    """Dispatch by name: add, sub, mul, div, sqdiff, abs, exp, clamp, reciprocal, sigmoid, neg."""
    if op_kind in _BINARY:
        if b is None:
            raise ValueError(f"{op_kind} needs two operands")
        return _BINARY[op_kind](a, b)
    if op_kind == "clamp":
        return clamp(a, *(() if b is None else b), **kwargs)
    if op_kind in _UNARY:
        return _UNARY[op_kind](a)
    raise ValueError(f"unknown elementwise op {op_kind!r}")


# ----------------------------------------------------------------- reductions


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, (int, np.integer)) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ValueError(f"axis {ax} out of range for {ndim}-d tensor")
        out.append(ax % ndim)
    if len(set(out)) != len(out):
        raise ValueError(f"repeated axis in {axis}")
    return tuple(sorted(out))


def reduce(op_kind: str, a, axis=None) -> Tensor:
    """Sum or mean over ``axis`` (None reduces everything to a scalar)."""
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    if op_kind == "sum":
        scale = 1.0
    elif op_kind == "mean":
        count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
        scale = 1.0 / max(count, 1)
    else:
        raise ValueError(f"unknown reduction {op_kind!r}")
    out = a.data.sum(axis=axes) * scale
    keep_shape = tuple(1 if i in axes else n for i, n in enumerate(a.shape))

    def bw(g):
        return (np.broadcast_to(np.reshape(g, keep_shape) * scale, a.shape).copy(),)

    return custom_op(out, (a,), bw)


def sum_(a, axis=None) -> Tensor:
    return reduce("sum", a, axis)


def mean(a, axis=None) -> Tensor:
    return reduce("mean", a, axis)


# -------------------------------------------------------------- shape and index


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    return custom_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def _has_advanced(key) -> bool:
    keys = key if isinstance(key, tuple) else (key,)
    return any(isinstance(k, (np.ndarray, list)) for k in keys)


def index(a, key) -> Tensor:
    """``a[key]``; advanced (integer/boolean array) keys scatter-add on backward."""
    a = as_tensor(a)
    out = a.data[key]
    advanced = _has_advanced(key)

    def bw(g):
        full = np.zeros_like(a.data)
        if advanced:
            np.add.at(full, key, g)
        else:
            full[key] = g
        return (full,)

    return custom_op(np.array(out, dtype=np.float64), (a,), bw)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return custom_op(np.concatenate([t.data for t in ts], axis=axis), ts, bw)


def stack_last(tensors: Sequence) -> Tensor:
    """Stack equally shaped tensors along a new trailing axis."""
    ts = [as_tensor(t) for t in tensors]
    shape = ts[0].shape
    for t in ts[1:]:
        if t.shape != shape:
            raise ValueError(f"shape mismatch: {shape} vs {t.shape}")

    def bw(g):
        return tuple(g[..., k] for k in range(len(ts)))

    return custom_op(np.stack([t.data for t in ts], axis=-1), ts, bw)


# ----------------------------------------------------------------- image ops


def _im2col(xp: np.ndarray, k: int, h: int, w: int) -> np.ndarray:
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    # (Cin, H, W, k, k) -> (Cin, k, k, H, W) -> (Cin*k*k, H*W)
    return np.ascontiguousarray(win.transpose(0, 3, 4, 1, 2)).reshape(-1, h * w)


def conv2d(x, kernel, bias) -> Tensor:
    """Same-size cross-correlation with zero padding (k-1)/2.

    x: (Cin, H, W), kernel: (Cout, Cin, k, k), bias: (Cout,).
    """
    x, kernel, bias = as_tensor(x), as_tensor(kernel), as_tensor(bias)
    if x.ndim != 3 or kernel.ndim != 4:
        raise ValueError(f"conv2d expects (Cin,H,W) and (Cout,Cin,k,k), got {x.shape} and {kernel.shape}")
    cout, cin, k, k2 = kernel.shape
    if k != k2 or k % 2 == 0:
        raise ValueError(f"kernel must be square with odd size, got {k}x{k2}")
    if x.shape[0] != cin:
        raise ValueError(f"channel mismatch: input has {x.shape[0]}, kernel expects {cin}")
    if bias.shape != (cout,):
        raise ValueError(f"bias shape {bias.shape} does not match {cout} output channels")
    _, h, w = x.shape
    pad = (k - 1) // 2
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad)))
    cols = _im2col(xp, k, h, w)
    kmat = kernel.data.reshape(cout, -1)
    out = (kmat @ cols).reshape(cout, h, w) + bias.data[:, None, None]

    def bw(g):
        g2 = g.reshape(cout, -1)
        gk = (g2 @ cols.T).reshape(kernel.shape)
        gb = g2.sum(axis=1)
        gx = None
        if x.requires_grad:
            gcols = (kmat.T @ g2).reshape(cin, k, k, h, w)
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gxp[:, i : i + h, j : j + w] += gcols[:, i, j]
            gx = gxp[:, pad : pad + h, pad : pad + w]
        return gx, gk, gb

    return custom_op(out, (x, kernel, bias), bw)


@functools.lru_cache(maxsize=None)
def _upsample_matrix(n: int) -> np.ndarray:
    # align_corners=False: source coordinate (o + 0.5) / 2 - 0.5, clamped at 0
    m = np.zeros((2 * n, n))
    for o in range(2 * n):
        src = max((o + 0.5) / 2.0 - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n - 1)
        i1 = min(i0 + 1, n - 1)
        t = src - i0
        m[o, i0] += 1.0 - t
        m[o, i1] += t
    m.setflags(write=False)
    return m


def upsample_bilinear2x(x) -> Tensor:
    """(C, H, W) -> (C, 2H, 2W) bilinear, half-pixel centers."""
    x = as_tensor(x)
    if x.ndim != 3 or x.shape[1] < 1 or x.shape[2] < 1:
        raise ValueError(f"upsample expects (C,H,W) with H,W >= 1, got {x.shape}")
    ah = _upsample_matrix(x.shape[1])
    aw = _upsample_matrix(x.shape[2])
    out = ah @ x.data @ aw.T
    return custom_op(out, (x,), lambda g: (ah.T @ g @ aw,))


def bilinear_lookup(img, xy: np.ndarray) -> Tensor:
    """Sample a (H, W) map at continuous pixel coordinates.

    ``xy[..., 0]`` is u (width axis) and ``xy[..., 1]`` is v; pixel centers sit
    at integer + 0.5. Lookups outside the grid clamp to the border.
    """
    img = as_tensor(img)
    h, w = img.shape
    x = np.clip(np.asarray(xy[..., 0], dtype=np.float64) - 0.5, 0.0, w - 1)
    y = np.clip(np.asarray(xy[..., 1], dtype=np.float64) - 0.5, 0.0, h - 1)
    x0 = np.minimum(np.floor(x).astype(np.int64), max(w - 2, 0))
    y0 = np.minimum(np.floor(y).astype(np.int64), max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    tx = x - x0
    ty = y - y0
    d = img.data
    out = (
        d[y0, x0] * (1 - tx) * (1 - ty)
        + d[y0, x1] * tx * (1 - ty)
        + d[y1, x0] * (1 - tx) * ty
        + d[y1, x1] * tx * ty
    )

    def bw(g):
        full = np.zeros_like(d)
        np.add.at(full, (y0, x0), g * (1 - tx) * (1 - ty))
        np.add.at(full, (y0, x1), g * tx * (1 - ty))
        np.add.at(full, (y1, x0), g * (1 - tx) * ty)
        np.add.at(full, (y1, x1), g * tx * ty)
        return (full,)

    return custom_op(out, (img,), bw)
