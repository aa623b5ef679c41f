"""Minimal reverse-mode automatic differentiation over NumPy arrays.

Every model operation in the package is expressed with the primitives here.
A :class:`Tensor` records the operation that produced it (its parents and a
closure computing vector-Jacobian products); :func:`backward` walks that record
in reverse topological order and accumulates gradients into leaf tensors.

Two numeric widths are supported: float32 for training and float64 for
finite-difference gradient checks (see :func:`precision`).
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """A precondition of an operation was violated."""


class ConfigurationError(ValueError):
    """An operation was configured with invalid hyperparameters."""


_state = threading.local()


def _get(name, default):
    return getattr(_state, name, default)


def default_dtype() -> np.dtype:
    return _get("dtype", np.dtype(np.float32))


def grad_enabled() -> bool:
    return _get("grad", True)


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used for newly created tensors."""
    old = default_dtype()
    _state.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = old


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (inference)."""
    old = grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = old


class Tensor:
    """An n-dimensional array that can take part in reverse-mode autodiff."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name", "__weakref__")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else default_dtype())
        if arr.ndim and 0 in arr.shape:
            raise DimensionError(f"tensor extents must be positive, got {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    def __len__(self):
        return self.data.shape[0]

    # operator sugar
    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def __pow__(self, p):
        return power(self, p)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    @property
    def T(self):
        return transpose(self, None)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _node(data: np.ndarray, parents: Iterable[Tensor], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    parents = tuple(parents)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _lift(a, like: Tensor) -> Tensor:
    if isinstance(a, Tensor):
        return a
    return Tensor(np.asarray(a, dtype=like.dtype), dtype=like.dtype)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _lift(b, a)
    b = as_tensor(b)
    return _lift(a, b), b


# --------------------------------------------------------------------------
# elementwise arithmetic
# --------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(out, (a, b), bw)


def power(a: Tensor, p: float) -> Tensor:
    out = a.data**p

    def bw(g):
        return (g * p * a.data ** (p - 1),)

    return _node(out, (a,), bw)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: (g * 0.5 / out,))


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _node(np.maximum(a.data, 0).astype(a.dtype), (a,), lambda g: (g * pos,))  # NaN propagates


def sigmoid(a: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-a.data))
    return _node(out, (a,), lambda g: (g * out * (1 - out),))


def swish(a: Tensor) -> Tensor:
    """x * sigmoid(x)."""
    s = 1.0 / (1.0 + np.exp(-a.data))
    out = a.data * s

    def bw(g):
        return (g * (s + out * (1 - s)),)

    return _node(out, (a,), bw)


def glu(a: Tensor, axis: int = -1) -> Tensor:
    """Gated linear unit: first half * sigmoid(second half) along ``axis``."""
    x1, x2 = np.split(a.data, 2, axis=axis)
    s = 1.0 / (1.0 + np.exp(-x2))
    out = x1 * s

    def bw(g):
        return (np.concatenate([g * s, g * x1 * s * (1 - s)], axis=axis),)

    return _node(out, (a,), bw)


# --------------------------------------------------------------------------
# reductions and shape manipulation
# --------------------------------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _node(np.asarray(out, dtype=a.dtype), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[i] for i in axes]))
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    return _node(np.swapaxes(a.data, i, j), (a,), lambda g: (np.swapaxes(g, i, j),))


def getitem(a: Tensor, idx) -> Tensor:
    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g) if _is_fancy(idx) else full.__setitem__(idx, g)
        return (full,)

    return _node(a.data[idx], (a,), bw)


def _is_fancy(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def bw(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _node(np.stack([t.data for t in tensors], axis=axis), tensors, bw)


def pad(a: Tensor, widths: Sequence[tuple[int, int]]) -> Tensor:
    """Zero-pad; ``widths`` has one (before, after) pair per axis."""
    slices = tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, a.shape))
    return _node(np.pad(a.data, widths), (a,), lambda g: (g[slices],))


def where(mask: np.ndarray, a: Tensor, value: float) -> Tensor:
    """Keep ``a`` where ``mask`` is true, fill ``value`` elsewhere (mask is constant)."""
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, a.data, np.asarray(value, dtype=a.dtype))
    return _node(out, (a,), lambda g: (_unbroadcast(g * mask, a.shape),))


def pick(a: Tensor, index: np.ndarray) -> Tensor:
    """Select ``a[..., index[...]]`` along the last axis (integer index, same leading shape)."""
    index = np.asarray(index)
    out = np.take_along_axis(a.data, index[..., None], axis=-1)[..., 0]

    def bw(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, index[..., None], g[..., None], axis=-1)
        return (full,)

    return _node(out, (a,), bw)


# --------------------------------------------------------------------------
# linear algebra
# --------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, with NumPy batch broadcasting."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _node(a.data @ b.data, (a, b), bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w + b with w of shape (in, out)."""
    y = matmul(x, w)
    return y if b is None else add(y, b)


# --------------------------------------------------------------------------
# normalisation and probability
# --------------------------------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (x,), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _node(out, (x,), bw)


LN_EPS = 1e-5


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalise the last axis to zero mean / unit population variance, then gain*x + bias."""
    d = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gain.data + bias.data

    def bw(g):
        gx = gg = gb = None
        if gain.requires_grad:
            gg = _unbroadcast(g * xhat, gain.shape)
        if bias.requires_grad:
            gb = _unbroadcast(g, bias.shape)
        if x.requires_grad:
            gh = g * gain.data
            gx = rstd * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).sum(axis=-1, keepdims=True) / d)
        return gx, gg, gb

    return _node(out, (x, gain, bias), bw)


# --------------------------------------------------------------------------
# convolutions
# --------------------------------------------------------------------------


def conv1d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, left_pad: int = 0) -> Tensor:
    """Temporal convolution of ``x`` (..., T, C_in) with ``w`` (K, C_in, C_out).

    ``left_pad`` zero frames are prepended; no right padding.  Output frame t
    reads padded frames [t*stride, t*stride + K).
    """
    if stride <= 0:
        raise ConfigurationError(f"stride must be positive, got {stride}")
    k, cin, cout = w.shape
    if x.shape[-1] != cin:
        raise DimensionError(f"conv1d channel mismatch: input {x.shape} vs kernel {w.shape}")
    tax = x.ndim - 2
    widths = [(0, 0)] * x.ndim
    widths[tax] = (left_pad, 0)
    xp = np.pad(x.data, widths) if left_pad else x.data
    tp = xp.shape[tax]
    if tp < k:
        raise DimensionError(f"conv1d input too short: {tp} padded frames for kernel {k}")
    # (..., T_out, C_in, K)
    win = sliding_window_view(xp, k, axis=tax)[..., ::stride, :, :]
    t_out = win.shape[tax]
    cols = win.reshape(*win.shape[:-2], cin * k)
    wmat = np.transpose(w.data, (1, 0, 2)).reshape(cin * k, cout)
    out = cols @ wmat
    if b is not None:
        out = out + b.data

    def bw(g):
        gx = gw = gb = None
        if w.requires_grad:
            gw2 = cols.reshape(-1, cin * k).T @ g.reshape(-1, cout)
            gw = np.transpose(gw2.reshape(cin, k, cout), (1, 0, 2))
        if b is not None and b.requires_grad:
            gb = g.reshape(-1, cout).sum(axis=0)
        if x.requires_grad:
            gcols = (g @ wmat.T).reshape(*g.shape[:-1], cin, k)
            gxp = np.zeros_like(xp)
            for j in range(k):
                sl = [slice(None)] * x.ndim
                sl[tax] = slice(j, j + stride * (t_out - 1) + 1, stride)
                gxp[tuple(sl)] += gcols[..., j]
            sl = [slice(None)] * x.ndim
            sl[tax] = slice(left_pad, None)
            gx = gxp[tuple(sl)]
        return (gx, gw) if b is None else (gx, gw, gb)

    parents = (x, w) if b is None else (x, w, b)
    return _node(out, parents, bw)


def depthwise_conv1d(x: Tensor, w: Tensor, b: Tensor | None = None, left_pad: int = 0, right_pad: int = 0) -> Tensor:
    """Per-channel temporal convolution of ``x`` (..., T, C) with ``w`` (K, C)."""
    k, c = w.shape
    tax = x.ndim - 2
    widths = [(0, 0)] * x.ndim
    widths[tax] = (left_pad, right_pad)
    xp = np.pad(x.data, widths)
    win = sliding_window_view(xp, k, axis=tax)  # (..., T_out, C, K)
    wt = w.data.T  # (C, K)
    out = np.einsum("...ck,ck->...c", win, wt)
    if b is not None:
        out = out + b.data
    t_out = out.shape[tax]

    def bw(g):
        gx = gw = gb = None
        if w.requires_grad:
            gw = np.einsum("nck,nc->kc", win.reshape(-1, c, k), g.reshape(-1, c))
        if b is not None and b.requires_grad:
            gb = g.reshape(-1, c).sum(axis=0)
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for j in range(k):
                sl = [slice(None)] * x.ndim
                sl[tax] = slice(j, j + t_out)
                gxp[tuple(sl)] += g * w.data[j]
            sl = [slice(None)] * x.ndim
            sl[tax] = slice(left_pad, left_pad + x.shape[tax])
            gx = gxp[tuple(sl)]
        return (gx, gw) if b is None else (gx, gw, gb)

    parents = (x, w) if b is None else (x, w, b)
    return _node(out, parents, bw)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, time_pad: tuple[int, int] = (0, 0),
           feat_pad: tuple[int, int] = (0, 0)) -> Tensor:
    """Stride-1 2-D convolution of ``x`` (B, C_in, T, F) with ``w`` (C_out, C_in, kT, kF)."""
    cout, cin, kt, kf = w.shape
    if x.ndim != 4 or x.shape[1] != cin:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape} vs kernel {w.shape}")
    xp = np.pad(x.data, ((0, 0), (0, 0), time_pad, feat_pad))
    win = sliding_window_view(xp, (kt, kf), axis=(2, 3))  # (B, Cin, T, F, kT, kF)
    bsz, _, t_out, f_out = win.shape[:4]
    cols = np.transpose(win, (0, 2, 3, 1, 4, 5)).reshape(bsz * t_out * f_out, cin * kt * kf)
    wmat = w.data.reshape(cout, -1).T
    out = (cols @ wmat).reshape(bsz, t_out, f_out, cout)
    out = np.ascontiguousarray(np.transpose(out, (0, 3, 1, 2)))
    if b is not None:
        out = out + b.data[:, None, None]

    def bw(g):
        gx = gw = gb = None
        g2 = np.transpose(g, (0, 2, 3, 1)).reshape(-1, cout)
        if w.requires_grad:
            gw = (cols.T @ g2).T.reshape(w.shape)
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            gcols = (g2 @ wmat.T).reshape(bsz, t_out, f_out, cin, kt, kf)
            gxp = np.zeros_like(xp)
            for i in range(kt):
                for j in range(kf):
                    gxp[:, :, i:i + t_out, j:j + f_out] += np.transpose(gcols[..., i, j], (0, 3, 1, 2))
            gx = gxp[:, :, time_pad[0]:time_pad[0] + x.shape[2], feat_pad[0]:feat_pad[0] + x.shape[3]]
        return (gx, gw) if b is None else (gx, gw, gb)

    parents = (x, w) if b is None else (x, w, b)
    return _node(out, parents, bw)


def causal_conv(x: Tensor, kernel: Tensor, stride: int = 1, mode: str = "1d", bias: Tensor | None = None) -> Tensor:
    """Convolution whose output at time t only sees inputs at times <= t.

    1d: ``x`` is (..., T, C_in), ``kernel`` is (K, C_in, C_out).
    2d: ``x`` is (B, C_in, T, F), ``kernel`` is (C_out, C_in, kT, kF); the
    feature axis is padded symmetrically ("same") and only stride 1 is allowed.
    """
    if stride <= 0:
        raise ConfigurationError(f"stride must be positive, got {stride}")
    if mode == "1d":
        return conv1d(x, kernel, bias, stride=stride, left_pad=kernel.shape[0] - 1)
    if mode == "2d":
        if stride != 1:
            raise ConfigurationError("2d causal convolution supports stride 1 only")
        kt, kf = kernel.shape[2:]
        return conv2d(x, kernel, bias, time_pad=(kt - 1, 0), feat_pad=((kf - 1) // 2, kf // 2))
    raise ConfigurationError(f"unknown convolution mode {mode!r}")


# --------------------------------------------------------------------------
# backward pass
# --------------------------------------------------------------------------


def _topo_order(root: Tensor) -> list[Tensor]:
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


def backward(loss: Tensor) -> dict[int, np.ndarray]:
    """Propagate d(loss)/d(.) to every ``requires_grad`` ancestor of ``loss``.

    Leaf gradients are *added* to ``leaf.grad`` (callers zero them explicitly
    between steps).  Returns ``{id(leaf): gradient}`` for the leaves reached.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, np.ndarray] = {}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            g = np.asarray(g, dtype=node.dtype).reshape(node.shape)
            node.grad = g.copy() if node.grad is None else node.grad + g
            leaves[id(node)] = g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return leaves
