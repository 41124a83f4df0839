"""Dense tensors with reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array. Operations on tensors that require
gradients record a backward closure and their parents; :func:`backward`
replays the recorded graph in reverse creation order, which is a valid
topological order because every node is created after its inputs.

Storage is 32-bit by default. Use :func:`precision` (or
:func:`set_default_dtype`) to switch to 64-bit, which finite-difference
checks require.
"""

from __future__ import annotations

import contextlib
import itertools
import math
from typing import Callable, Iterable, Sequence

import numpy as np

from . import _kernels

_default_dtype = np.dtype(np.float32)
_grad_enabled = True
_debug = False
_counter = itertools.count()

#: number of log-probabilities clamped at LOG_FLOOR since import
clamp_events = 0
LOG_FLOOR = 1e-12


class ShapeError(ValueError):
    """Operand shapes do not conform for a primitive."""


class NumericError(FloatingPointError):
    """A non-finite value was produced or observed."""


def get_default_dtype() -> np.dtype:
    return _default_dtype


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported storage dtype {dt}")
    _default_dtype = dt


@contextlib.contextmanager
def precision(dtype):
    prev = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def set_debug(flag: bool) -> None:
    """Check every op output for NaN/Inf (slow)."""
    global _debug
    _debug = bool(flag)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_order", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.array(data, dtype=dtype or _default_dtype, copy=True)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents: tuple = ()
        self._backward = None
        self._order = next(_counter)
        self.name = name

    @property
    def shape(self) -> tuple:
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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return _const(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    # operators
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def _const(arr) -> Tensor:
    t = Tensor.__new__(Tensor)
    t.data = arr
    t.grad = None
    t.requires_grad = False
    t._parents = ()
    t._backward = None
    t._order = next(_counter)
    t.name = None
    return t


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return _const(np.asarray(x, dtype=_default_dtype))


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    if _debug and not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite output from {op}")
    t = _const(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = tuple(parents)
        t._backward = backward
    return t


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(op: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a.data, b.data)
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a.data, b.data)
    sa, sb = a.shape, b.shape
    return _node(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a.data, b.data)
    ad, bd = a.data, b.data

    def bw(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _node(ad * bd, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a.data, b.data)
    ad, bd = a.data, b.data

    def bw(g):
        return (
            _unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(-g * ad / (bd * bd), bd.shape) if b.requires_grad else None,
        )

    return _node(ad / bd, (a, b), bw, "div")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 1 or bd.ndim < 1 or ad.shape[-1] != bd.shape[-2 if bd.ndim > 1 else 0]:
        raise ShapeError(f"matmul: shapes {ad.shape} and {bd.shape} are not aligned")
    try:
        out = np.matmul(ad, bd)
    except ValueError as exc:
        raise ShapeError(f"matmul: {exc}") from None

    def bw(g):
        ga = gb = None
        if ad.ndim == 1 or bd.ndim == 1:
            a2 = ad[None, :] if ad.ndim == 1 else ad
            b2 = bd[:, None] if bd.ndim == 1 else bd
            g2 = g
            if ad.ndim == 1:
                g2 = np.expand_dims(g2, -2)
            if bd.ndim == 1:
                g2 = np.expand_dims(g2, -1)
            if a.requires_grad:
                ga = _unbroadcast(np.matmul(g2, np.swapaxes(b2, -1, -2)), a2.shape).reshape(ad.shape)
            if b.requires_grad:
                gb = _unbroadcast(np.matmul(np.swapaxes(a2, -1, -2), g2), b2.shape).reshape(bd.shape)
            return ga, gb
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return _node(out, (a, b), bw, "matmul")


def sum_(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(np.asarray(out), (x,), bw, "sum")


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _node(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def concat(xs: Sequence, axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _node(out, xs, bw, "concat")


def stack(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    try:
        out = np.stack([x.data for x in xs], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"stack: {exc}") from None

    def bw(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _node(out, xs, bw, "stack")


def getitem(x, idx) -> Tensor:
    x = as_tensor(x)
    shape, dtype = x.shape, x.dtype
    out = x.data[idx]
    basic = _is_basic_index(idx)

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _node(out, (x,), bw, "getitem")


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _node(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _node(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


LEAKY_SLOPE = 0.01


def leaky_relu(x, slope: float = LEAKY_SLOPE) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    y = np.where(pos, x.data, slope * x.data)
    return _node(y, (x,), lambda g: (np.where(pos, g, slope * g),), "leaky_relu")


def exp(x) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.data)
    return _node(y, (x,), lambda g: (g * y,), "exp")


def log(x, floor: float | None = None) -> Tensor:
    """Natural log; with ``floor`` the argument is clamped from below and
    clamped entries get zero gradient."""
    global clamp_events
    x = as_tensor(x)
    xd = x.data
    if floor is not None:
        low = xd < floor
        if low.any():
            clamp_events += int(low.sum())
            xd = np.where(low, floor, xd)
        else:
            low = None
    else:
        low = None

    def bw(g):
        gx = g / xd
        if low is not None:
            gx = np.where(low, 0.0, gx)
        return (gx,)

    return _node(np.log(xd), (x,), bw, "log")


def softmax(x, axis: int = -1, mask=None) -> Tensor:
    """Softmax along ``axis``; entries where ``mask`` is 0 get probability 0."""
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[axis] == 0:
        raise ValueError("softmax: empty axis")
    xd = x.data
    if mask is not None:
        m = np.asarray(mask, dtype=bool)
        xd = np.where(m, xd, -np.inf)
        mx = np.max(xd, axis=axis, keepdims=True)
        mx = np.where(np.isfinite(mx), mx, 0.0)
        e = np.where(m, np.exp(xd - mx), 0.0)
        s = e.sum(axis=axis, keepdims=True)
        y = e / np.where(s > 0, s, 1.0)
    else:
        e = np.exp(xd - xd.max(axis=axis, keepdims=True))
        y = e / e.sum(axis=axis, keepdims=True)
    y = y.astype(x.dtype, copy=False)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _node(y, (x,), bw, "softmax")


def gradient_reversal(x, lam: float = 1.0) -> Tensor:
    """Identity forward; backward multiplies the upstream gradient by ``-lam``."""
    x = as_tensor(x)
    lam = float(lam)
    return _node(x.data, (x,), lambda g: (g * (-lam),), "gradient_reversal")


def dropout(x, p: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Inverted dropout; identity outside training."""
    x = as_tensor(x)
    if not training or p <= 0.0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return _node(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


# ---------------------------------------------------------------------------
# lookup, pooling, convolution
# ---------------------------------------------------------------------------


def embedding(weight: Tensor, ids) -> Tensor:
    """Row lookup ``weight[ids]`` with scatter-add backward."""
    ids = np.asarray(ids, dtype=np.int64)
    V = weight.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= V):
        raise IndexError(f"embedding: id out of range for table of {V} rows")
    wshape, wdtype = weight.shape, weight.dtype

    def bw(g):
        out = np.zeros(wshape, dtype=wdtype)
        _kernels.scatter_add_rows(out, ids.reshape(-1), g.reshape(-1, wshape[1]))
        return (out,)

    return _node(weight.data[ids], (weight,), bw, "embedding")


def max_pool_seq(x, mask) -> Tensor:
    """Max over axis 1 of ``(B, T, H)`` restricted to positions where mask is 1."""
    x = as_tensor(x)
    m = np.asarray(mask, dtype=bool)
    if x.ndim != 3 or m.shape != x.shape[:2]:
        raise ShapeError(f"max_pool_seq: x {x.shape} mask {m.shape}")
    xd = np.where(m[..., None], x.data, -np.inf)
    arg = xd.argmax(axis=1)
    out = np.take_along_axis(xd, arg[:, None, :], axis=1)[:, 0, :]
    out = np.where(np.isfinite(out), out, 0.0).astype(x.dtype)
    shape, dtype = x.shape, x.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        np.put_along_axis(full, arg[:, None, :], g[:, None, :], axis=1)
        return (full * m[..., None],)

    return _node(out, (x,), bw, "max_pool_seq")


def conv1d(x, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Same-padded 1-D convolution over axis 1 of ``(B, T, I)`` with ``weight`` of
    shape ``(K, I, O)`` (odd ``K``)."""
    x = as_tensor(x)
    K, I, O = weight.shape
    if x.ndim != 3 or x.shape[2] != I or K % 2 != 1:
        raise ShapeError(f"conv1d: x {x.shape} weight {weight.shape}")
    B, T, _ = x.shape
    pad = K // 2
    xp = np.pad(x.data, ((0, 0), (pad, pad), (0, 0)))
    cols = np.concatenate([xp[:, k : k + T, :] for k in range(K)], axis=-1)
    Wr = weight.data.reshape(K * I, O)
    out = cols @ Wr
    parents = [x, weight]
    if bias is not None:
        out = out + bias.data
        parents.append(bias)

    def bw(g):
        gx = gw = gb = None
        if x.requires_grad:
            dcols = g @ Wr.T
            dxp = np.zeros_like(xp)
            for k in range(K):
                dxp[:, k : k + T, :] += dcols[..., k * I : (k + 1) * I]
            gx = dxp[:, pad : pad + T, :]
        if weight.requires_grad:
            gw = (cols.reshape(-1, K * I).T @ g.reshape(-1, O)).reshape(K, I, O)
        if bias is not None and bias.requires_grad:
            gb = g.reshape(-1, O).sum(axis=0)
        return (gx, gw, gb) if bias is not None else (gx, gw)

    return _node(out, parents, bw, "conv1d")


# ---------------------------------------------------------------------------
# fused recurrences (kernels in _kernels)
# ---------------------------------------------------------------------------


def lstm_sequence(x, W: Tensor, b: Tensor, lengths, reverse: bool = False) -> Tensor:
    """Run ``E`` stacked LSTMs over a padded batch.

    ``x``: (B, T, I) shared by all stacked cells; ``W``: (E, I+H, 4H);
    ``b``: (E, 4H). Returns (E, B, T, H) with zeros at padded positions.
    Initial state is zero. With ``reverse`` each sequence is read from its own
    last valid token backwards.
    """
    x = as_tensor(x)
    lengths = np.asarray(lengths, dtype=np.int64)
    if x.ndim != 3 or W.ndim != 3 or W.shape[1] != x.shape[2] + W.shape[2] // 4:
        raise ShapeError(f"lstm_sequence: x {x.shape} W {W.shape}")
    out, cache = _kernels.lstm_seq_forward(x.data, W.data, b.data, lengths, reverse)

    def bw(g):
        dx, dW, db = _kernels.lstm_seq_backward(g, x.data, W.data, lengths, reverse, cache)
        return dx, dW, db

    return _node(out, (x, W, b), bw, "lstm_sequence")


def lstm_cell(x, h, c, W: Tensor, b: Tensor) -> Tensor:
    """One step of ``E`` stacked LSTM cells sharing the input ``x`` (B, I).

    ``h``, ``c``: (E, B, H). Returns (E, B, 2H) holding ``[h_new, c_new]``.
    """
    x, h, c = as_tensor(x), as_tensor(h), as_tensor(c)
    H = h.shape[2]
    if x.ndim != 2 or W.shape[1] != x.shape[1] + H or W.shape[2] != 4 * H:
        raise ShapeError(f"lstm_cell: x {x.shape} h {h.shape} W {W.shape}")
    hn, cn, gates = _kernels.lstm_step_forward(x.data, h.data, c.data, W.data, b.data)

    def bw(g):
        dx, dh, dc, dW, db = _kernels.lstm_step_backward(
            g[..., :H], g[..., H:], x.data, h.data, c.data, W.data, cn, gates
        )
        return dx, dh, dc, dW, db

    return _node(np.concatenate([hn, cn], axis=-1), (x, h, c, W, b), bw, "lstm_cell")


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def nll(probs, targets, mask=None) -> Tensor:
    """Elementwise ``-log p[target]`` over the last axis, clamped at LOG_FLOOR.

    Returns a tensor shaped like ``targets``; masked entries are 0.
    """
    probs = as_tensor(probs)
    t = np.asarray(targets, dtype=np.int64)
    if probs.shape[:-1] != t.shape:
        raise ShapeError(f"nll: probs {probs.shape} targets {t.shape}")
    picked = getitem(probs, _last_axis_index(t))
    out = mul(log(picked, floor=LOG_FLOOR), -1.0)
    if mask is not None:
        out = mul(out, np.asarray(mask, dtype=probs.dtype))
    return out


def _last_axis_index(t: np.ndarray):
    grids = np.indices(t.shape, sparse=True)
    return tuple(grids) + (t,)


def binary_cross_entropy(p, target, mask=None) -> Tensor:
    """Elementwise ``-(y log p + (1-y) log(1-p))`` with both logs clamped."""
    p = as_tensor(p)
    y = np.asarray(target, dtype=p.dtype)
    if y.shape != p.shape:
        raise ShapeError(f"binary_cross_entropy: p {p.shape} target {y.shape}")
    pos = mul(log(p, floor=LOG_FLOOR), y)
    neg = mul(log(sub(1.0, p), floor=LOG_FLOOR), 1.0 - y)
    out = mul(add(pos, neg), -1.0)
    if mask is not None:
        out = mul(out, np.asarray(mask, dtype=p.dtype))
    return out


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


def _topo(root: Tensor) -> list:
    seen = set()
    nodes = []
    stack = [root]
    while stack:
        n = stack.pop()
        if id(n) in seen:
            continue
        seen.add(id(n))
        nodes.append(n)
        for p in n._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append(p)
    nodes.sort(key=lambda n: n._order, reverse=True)
    return nodes


def backward(loss: Tensor, grad: np.ndarray | None = None) -> None:
    """Accumulate ``d loss / d t`` into ``t.grad`` for every reachable tensor
    that requires gradients."""
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    pending = {id(loss): np.ones_like(loss.data) if grad is None else np.asarray(grad, loss.dtype)}
    for node in _topo(loss):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
            continue
        node.grad = g if node.grad is None else node.grad + g
        for p, gp in zip(node._parents, node._backward(g)):
            if gp is None or not p.requires_grad:
                continue
            prev = pending.get(id(p))
            pending[id(p)] = gp if prev is None else prev + gp


def check_gradients(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between the analytic gradient of scalar ``f`` at ``x``
    and a central finite difference, per coordinate
    ``|a - n| / max(|a|, |n|, 1e-8)``.

    ``x.grad`` is left as it was found.
    """
    if x.dtype != np.float64:
        raise ValueError("check_gradients needs 64-bit storage")
    saved = None if x.grad is None else x.grad.copy()
    was = x.requires_grad
    x.requires_grad = True
    x.grad = np.zeros_like(x.data)
    out = f(x)
    if not np.isfinite(out.data).all():
        raise NumericError("check_gradients: f is not finite at x")
    backward(out)
    analytic = x.grad.copy()
    numeric = np.zeros_like(analytic)
    flat = x.data.reshape(-1)
    nflat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f(x).item()
            flat[i] = orig - eps
            fm = f(x).item()
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise NumericError(f"check_gradients: f not finite near coordinate {i}")
            nflat[i] = (fp - fm) / (2.0 * eps)
    x.grad = saved
    x.requires_grad = was
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


# ---------------------------------------------------------------------------
# optimization
# ---------------------------------------------------------------------------


def clip_grad_norm(params: Iterable[Tensor], max_norm: float) -> float:
    params = [p for p in params if p.grad is not None]
    total = math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params))
    if not math.isfinite(total):
        raise NumericError("gradient norm is not finite")
    if total > max_norm:
        scale = max_norm / (total + 1e-6)
        for p in params:
            p.grad *= scale
    return total


class Adam:
    """Adam with bias correction. Gradients are read, never cleared."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for p in self.params:
            if p.grad is None:
                raise ValueError(f"adam_step: parameter {p.name or '?'} has no gradient")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()
