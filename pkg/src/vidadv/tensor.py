"""Dense tensors with reverse-mode automatic differentiation.

Every operation returns a new :class:`Tensor`. When at least one input
requires a gradient (and recording is enabled) the result keeps a reference
to its inputs together with a closure mapping the output gradient to input
gradients. :func:`backward` orders the recorded graph topologically and
replays those closures from a scalar root.

Video tensors are channels-last: ``(B, T, H, W, C)``. Convolution kernels
are stored as ``(kt, kh, kw, C_in, C_out)``.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

_state = threading.local()


def is_recording() -> bool:
    return getattr(_state, "recording", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording on the current thread."""
    prev = is_recording()
    _state.recording = False
    try:
        yield
    finally:
        _state.recording = prev


class NonFiniteError(FloatingPointError):
    """Raised by :func:`detect_nonfinite` naming the operation that produced NaN/inf."""


@contextlib.contextmanager
def detect_nonfinite(enabled: bool = True):
    """Check every operation's output (and gradients) for NaN/inf on this thread."""
    prev = getattr(_state, "check", False)
    _state.check = enabled
    try:
        yield
    finally:
        _state.check = prev


def _check_finite(arr: np.ndarray, op: str, what: str = "output") -> None:
    if getattr(_state, "check", False) and not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in {what} of operation '{op}'")


def _contig(a, dtype=None) -> np.ndarray:
    """C-contiguous copy/view that keeps 0-d arrays 0-d."""
    return np.asarray(a, dtype=dtype, order="C")


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        return _contig(arr, dtype)
    if arr.dtype != np.float64:
        arr = arr.astype(np.float32, copy=False)
    return _contig(arr)


class Tensor:
    """An n-dimensional float array that can take part in a gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    # -- basic properties -------------------------------------------------
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        backward(self)

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p: float):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _raise_item(t: Tensor):
    raise ValueError(f"item() needs a single-element tensor, got shape {t.shape}")


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _lift(x, like: np.ndarray | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else np.float32))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    if is_recording() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _check_broadcast(op: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- elementwise ----------------------------------------------------------

def add(a, b) -> Tensor:
    a = _lift(a)
    b = _lift(b, a.data)
    _check_broadcast("add", a.data, b.data)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a = _lift(a)
    b = _lift(b, a.data)
    _check_broadcast("sub", a.data, b.data)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a = _lift(a)
    b = _lift(b, a.data)
    _check_broadcast("mul", a.data, b.data)
    ad, bd = a.data, b.data

    def bw(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return _make(ad * bd, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a = _lift(a)
    b = _lift(b, a.data)
    _check_broadcast("div", a.data, b.data)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return (_unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None)

    return _make(out, (a, b), bw, "div")


def power(a: Tensor, p: float) -> Tensor:
    ad = a.data
    return _make(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1),), "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    out = _stable_sigmoid(a.data)
    return _make(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1 / (1 + z), z / (1 + z)).astype(x.dtype, copy=False)


def log_sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.minimum(x, 0) - np.log1p(np.exp(-np.abs(x)))
    return _make(out.astype(x.dtype, copy=False), (a,),
                 lambda g: (g * (1 - _stable_sigmoid(x)),), "log_sigmoid")


def sign(a: Tensor) -> Tensor:
    """Elementwise sign with ``sign(0) == 0``; the gradient is zero."""
    return _make(np.sign(a.data), (a,), lambda g: (np.zeros_like(g),), "sign")


def absolute(a: Tensor) -> Tensor:
    s = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (g * s,), "abs")


def clamp(a: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clip to ``[lo, hi]``. Subgradient is 1 strictly inside, 0 on or outside the bounds."""
    x = a.data
    out = np.clip(x, lo, hi)
    inside = np.ones(x.shape, dtype=bool)
    if lo is not None:
        inside &= x > lo
    if hi is not None:
        inside &= x < hi
    return _make(out, (a,), lambda g: (g * inside,), "clamp")


def where(mask, a, b) -> Tensor:
    """Select ``a`` where ``mask`` is true and ``b`` elsewhere (assign-on-support)."""
    a = _lift(a)
    b = _lift(b, a.data)
    m = np.asarray(mask, dtype=bool)
    out = np.where(m, a.data, b.data)
    sa, sb = a.shape, b.shape
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g * m, sa), _unbroadcast(g * ~m, sb)), "where")


# -- shape ----------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ValueError(f"reshape: cannot view {src} as {tuple(shape)}") from None
    return _make(out, (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    inv = np.argsort(axes)
    return _make(_contig(a.data.transpose(axes)), (a,),
                 lambda g: (g.transpose(inv),), "transpose")


def getitem(a: Tensor, idx) -> Tensor:
    src, dt = a.shape, a.dtype

    def bw(g):
        full = np.zeros(src, dtype=dt)
        np.add.at(full, idx, g) if _is_fancy(idx) else full.__setitem__(idx, g)
        return (full,)

    return _make(_contig(a.data[idx]), (a,), bw, "getitem")


def _is_fancy(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        sl = [slice(None)] * g.ndim
        grads = []
        for i in range(len(tensors)):
            sl[axis] = slice(bounds[i], bounds[i + 1])
            grads.append(g[tuple(sl)])
        return tuple(grads)

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


# -- reductions (accumulated in float64) ----------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def _expand(g: np.ndarray, shape, axes, keepdims: bool) -> np.ndarray:
    if not keepdims:
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out = np.sum(a.data, axis=axes, dtype=np.float64, keepdims=keepdims).astype(a.dtype)
    shape = a.shape
    return _make(np.asarray(out), (a,),
                 lambda g: (_contig(_expand(g, shape, axes, keepdims)),), "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    out = np.mean(a.data, axis=axes, dtype=np.float64, keepdims=keepdims).astype(a.dtype)
    shape = a.shape
    return _make(np.asarray(out), (a,),
                 lambda g: (_contig(_expand(g / n, shape, axes, keepdims)),), "mean")


def tmax(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Maximum; the gradient goes to the first maximal entry along the reduced axes."""
    axes = _norm_axes(axis, a.ndim)
    keep = [i for i in range(a.ndim) if i not in axes]
    moved = np.moveaxis(a.data, axes, range(a.ndim - len(axes), a.ndim)) if axes else a.data
    flat = moved.reshape(moved.shape[: len(keep)] + (-1,))
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    shape = a.shape
    if keepdims:
        out = np.expand_dims(out, axes)

    def bw(g):
        gk = g if not keepdims else g.reshape(arg.shape)
        gflat = np.zeros(flat.shape, dtype=a.dtype)
        np.put_along_axis(gflat, arg[..., None], gk[..., None], axis=-1)
        gm = gflat.reshape(moved.shape)
        return (np.moveaxis(gm, range(a.ndim - len(axes), a.ndim), axes) if axes else gm,)

    return _make(np.asarray(out), (a,), bw, "max")


def l1_norm(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return tsum(absolute(a), axis, keepdims)


# -- softmax family -------------------------------------------------------

def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted, dtype=np.float64), axis=axis, keepdims=True))
    out = (shifted - lse).astype(x.dtype)
    sm = np.exp(out)
    return _make(out, (a,), lambda g: (g - sm * g.sum(axis=axis, keepdims=True),), "log_softmax")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    e = np.exp(x - x.max(axis=axis, keepdims=True), dtype=np.float64)
    out = (e / e.sum(axis=axis, keepdims=True)).astype(x.dtype)
    return _make(out, (a,),
                 lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),), "softmax")


# -- linear algebra ------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: shapes {a.shape} and {b.shape} are not (n,k)@(k,m)")
    ad, bd = a.data, b.data

    def bw(g):
        return (g @ bd.T if a.requires_grad else None,
                ad.T @ g if b.requires_grad else None)

    return _make(ad @ bd, (a, b), bw, "matmul")


# -- 3D convolution --------------------------------------------------------

def _triple(v) -> tuple[int, int, int]:
    if isinstance(v, int):
        return (v, v, v)
    return tuple(v)  # type: ignore[return-value]


def _im2col(xp: np.ndarray, k, s, out_sp) -> np.ndarray:
    """Gather (B*To*Ho*Wo, kt*kh*kw*C) patches from a padded channels-last input."""
    B, _, _, _, C = xp.shape
    sb, st, sh, sw, sc = xp.strides
    view = as_strided(
        xp,
        shape=(B, *out_sp, *k, C),
        strides=(sb, st * s[0], sh * s[1], sw * s[2], st, sh, sw, sc),
        writeable=False,
    )
    return view.reshape(B * out_sp[0] * out_sp[1] * out_sp[2], k[0] * k[1] * k[2] * C)


def _col2im(src: np.ndarray, wk: np.ndarray, padded_shape, k, s, out_sp) -> np.ndarray:
    """Adjoint of :func:`_im2col` applied to ``src @ wk[offset].T`` per kernel offset.

    ``src`` is (B*To*Ho*Wo, C_src) and ``wk`` is (kt, kh, kw, C_target, C_src). Doing one
    matmul per offset keeps every scattered block contiguous.
    """
    acc = np.zeros(padded_shape, dtype=src.dtype)
    B, C = padded_shape[0], padded_shape[-1]
    To, Ho, Wo = out_sp
    for a, b, d in itertools.product(range(k[0]), range(k[1]), range(k[2])):
        block = (src @ wk[a, b, d].T).reshape(B, To, Ho, Wo, C)
        acc[:, a:a + s[0] * To:s[0], b:b + s[1] * Ho:s[1], d:d + s[2] * Wo:s[2], :] += block
    return acc


def _pad(x: np.ndarray, p) -> np.ndarray:
    if not any(p):
        return x
    return np.pad(x, ((0, 0), (p[0], p[0]), (p[1], p[1]), (p[2], p[2]), (0, 0)))


def _unpad(x: np.ndarray, p) -> np.ndarray:
    if not any(p):
        return x
    return x[:, p[0]:x.shape[1] - p[0], p[1]:x.shape[2] - p[1], p[2]:x.shape[3] - p[2], :]


def conv3d(x: Tensor, w: Tensor, b: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """3D cross-correlation of ``x (B,T,H,W,Cin)`` with ``w (kt,kh,kw,Cin,Cout)``."""
    s, p = _triple(stride), _triple(padding)
    if x.ndim != 5 or w.ndim != 5 or x.shape[-1] != w.shape[3]:
        raise ValueError(f"conv3d: input {x.shape} incompatible with kernel {w.shape}")
    k = w.shape[:3]
    cout = w.shape[4]
    xp = _pad(x.data, p)
    out_sp = tuple((xp.shape[i + 1] - k[i]) // s[i] + 1 for i in range(3))
    if min(out_sp) < 1:
        raise ValueError(f"conv3d: kernel {k} larger than padded input {xp.shape[1:4]}")
    cols = _im2col(xp, k, s, out_sp)
    w2 = w.data.reshape(-1, cout)
    out = cols @ w2
    if b is not None:
        out += b.data
    B = x.shape[0]
    out = out.reshape(B, *out_sp, cout)
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        g2 = g.reshape(-1, cout)
        gx = gw = gb = None
        if x.requires_grad:
            gx = _unpad(_col2im(g2, w.data, xp.shape, k, s, out_sp), p)
        if w.requires_grad:
            gw = (cols.T @ g2).reshape(w.shape)
        if b is not None and b.requires_grad:
            gb = g2.sum(axis=0, dtype=np.float64).astype(g.dtype)
        return (gx, gw) if b is None else (gx, gw, gb)

    return _make(out, parents, bw, "conv3d")


def conv_transpose3d(x: Tensor, w: Tensor, b: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """Transposed 3D convolution; ``w`` is ``(kt,kh,kw,Cout,Cin)``.

    This is the adjoint of ``conv3d`` with the same kernel, stride and padding, so
    the output extent along each axis is ``(n - 1) * stride - 2 * padding + k``.
    """
    s, p = _triple(stride), _triple(padding)
    if x.ndim != 5 or w.ndim != 5 or x.shape[-1] != w.shape[4]:
        raise ValueError(f"conv_transpose3d: input {x.shape} incompatible with kernel {w.shape}")
    k = w.shape[:3]
    cout = w.shape[3]
    B = x.shape[0]
    in_sp = x.shape[1:4]
    full_sp = tuple((in_sp[i] - 1) * s[i] + k[i] for i in range(3))
    padded_shape = (B, *full_sp, cout)
    w2 = w.data.reshape(-1, x.shape[-1])  # (k^3*Cout, Cin)
    xf = x.data.reshape(-1, x.shape[-1])
    out = _unpad(_col2im(xf, w.data, padded_shape, k, s, in_sp), p)
    if b is not None:
        out = out + b.data
    out = _contig(out)
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        gp = _pad(g, p)
        cols = _im2col(gp, k, s, in_sp)
        gx = gw = gb = None
        if x.requires_grad:
            gx = (cols @ w2).reshape(x.shape)
        if w.requires_grad:
            gw = (cols.T @ xf).reshape(w.shape)
        if b is not None and b.requires_grad:
            gb = g.reshape(-1, cout).sum(axis=0, dtype=np.float64).astype(g.dtype)
        return (gx, gw) if b is None else (gx, gw, gb)

    return _make(out, parents, bw, "conv_transpose3d")


# -- pooling ---------------------------------------------------------------

def _pool_view(x: np.ndarray, k):
    B, T, H, W, C = x.shape
    if T % k[0] or H % k[1] or W % k[2]:
        raise ValueError(f"pool: spatial dims {(T, H, W)} not divisible by window {k}")
    v = x.reshape(B, T // k[0], k[0], H // k[1], k[1], W // k[2], k[2], C)
    return v.transpose(0, 1, 3, 5, 7, 2, 4, 6).reshape(B, T // k[0], H // k[1], W // k[2], C, -1)


def max_pool3d(x: Tensor, kernel=2) -> Tensor:
    """Non-overlapping max pooling (window == stride). Ties route to the first maximum."""
    k = _triple(kernel)
    win = _pool_view(x.data, k)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    shape = x.shape

    def bw(g):
        gw = np.zeros(win.shape, dtype=g.dtype)
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        B, To, Ho, Wo, C, _ = gw.shape
        gw = gw.reshape(B, To, Ho, Wo, C, *k).transpose(0, 1, 5, 2, 6, 3, 7, 4)
        return (_contig(gw).reshape(shape),)

    return _make(out, (x,), bw, "max_pool3d")


def avg_pool3d(x: Tensor, kernel=2) -> Tensor:
    k = _triple(kernel)
    B, T, H, W, C = x.shape
    if T % k[0] or H % k[1] or W % k[2]:
        raise ValueError(f"avg_pool3d: spatial dims {(T, H, W)} not divisible by window {k}")
    v = x.data.reshape(B, T // k[0], k[0], H // k[1], k[1], W // k[2], k[2], C)
    out = v.mean(axis=(2, 4, 6), dtype=np.float64).astype(x.dtype)
    n = k[0] * k[1] * k[2]

    def bw(g):
        gg = np.broadcast_to((g / n)[:, :, None, :, None, :, None, :], v.shape)
        return (_contig(gg).reshape(x.shape),)

    return _make(out, (x,), bw, "avg_pool3d")


def global_avg_pool(x: Tensor) -> Tensor:
    """Average over every axis between batch and channel."""
    return mean(x, axis=tuple(range(1, x.ndim - 1)))


# -- backward ----------------------------------------------------------------

def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> None:
    """Accumulate ``d root / d leaf`` into ``leaf.grad`` for every leaf requiring a gradient.

    Interior nodes have their ``grad`` overwritten with the gradient of this call.
    """
    if root.size != 1:
        raise ValueError(f"backward: root must be a scalar, got shape {root.shape}")
    if not root.requires_grad:
        raise ValueError("backward: root is not on the tape (no input requires grad)")
    grads: dict[int, np.ndarray] = {id(root): np.ones(root.shape, dtype=root.dtype)}
    for node in reversed(_topological(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        node.grad = g
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            _check_finite(pg, node.op, "gradient")
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


@contextlib.contextmanager
def frozen(params: Iterable[Tensor]):
    """Temporarily stop ``params`` from requiring gradients (e.g. during an attack)."""
    params = list(params)
    flags = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, f in zip(params, flags):
            p.requires_grad = f
