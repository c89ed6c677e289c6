"""Minimal reverse-mode automatic differentiation over numpy arrays.

Every tensor produced by a differentiable op remembers its parents and a
closure mapping the output gradient to parent gradients. Tensors carry a
monotonically increasing creation id, so sorting the reachable graph by
descending id is a valid reverse topological order (inputs always exist
before the ops that consume them).

Broadcasting in binary ops is deliberately narrow: equal shapes, a scalar
operand, or one shape being a suffix of the other (leading-axis
broadcast). Anything else needs an explicit reshape.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

LOG_CLAMP = 1e-12
MASK_VALUE = -1e9

_ids = itertools.count()
_grad_enabled = True


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an op."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_id")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._id = next(_ids)

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
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
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    # -- operators -----------------------------------------------------
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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self, grad: np.ndarray | None = None) -> None:
        backward(self, grad)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    # ops always produce float ndarrays, so skip the constructor's coercion
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._id = next(_ids)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


# -- backward sweep ----------------------------------------------------

def backward(loss: Tensor, grad: np.ndarray | None = None) -> None:
    """Populate ``.grad`` on every tensor reachable from ``loss``.

    Gradients accumulate (+=) so a tensor consumed along several paths
    receives the sum of the path gradients.
    """
    if grad is None:
        if loss.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    if not loss.requires_grad:
        raise ValueError("loss is not attached to any tensor that requires grad")

    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t._id in nodes:
            continue
        nodes[t._id] = t
        stack.extend(p for p in t._parents if p.requires_grad)

    grads: dict[int, np.ndarray] = {loss._id: np.asarray(grad, dtype=loss.dtype)}
    for tid in sorted(nodes, reverse=True):
        t = nodes[tid]
        g = grads.pop(tid, None)
        if g is None:
            continue
        t.grad = g if t.grad is None else t.grad + g
        if t._backward is None:
            continue
        for parent, pg in zip(t._parents, t._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent._id in grads:
                grads[parent._id] = grads[parent._id] + pg
            else:
                grads[parent._id] = pg


# -- broadcasting helpers ----------------------------------------------

def _check_broadcast(a: tuple, b: tuple, op: str) -> tuple:
    if a == b:
        return a
    if int(np.prod(a)) == 1 and len(a) <= len(b):
        return b
    if int(np.prod(b)) == 1 and len(b) <= len(a):
        return a
    if len(a) < len(b) and b[len(b) - len(a):] == a:
        return b
    if len(b) < len(a) and a[len(a) - len(b):] == b:
        return a
    raise ShapeError(f"{op}: shapes {a} and {b} are not broadcast-compatible "
                     "(only scalar and leading-axis broadcasting is supported)")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if int(np.prod(shape)) == 1:
        return np.sum(g).reshape(shape).astype(g.dtype)
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


# -- elementwise -------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    """Hadamard product."""
    a, b = _pair(a, b)
    _check_broadcast(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


hadamard = mul


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(x.data * c, (x,), lambda g: (g * c,))


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    xd = x.data
    e = np.exp(-np.abs(xd))
    y = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(xd.dtype)
    return _result(y, (x,), lambda g: (g * y * (1.0 - y),))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _result(np.where(pos, x.data, 0).astype(x.dtype), (x,), lambda g: (g * pos,))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _result(y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise ValueError(f"log of non-positive value (min {x.data.min():.3g})")
    xd = x.data
    return _result(np.log(xd), (x,), lambda g: (g / xd,))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


# -- shape ops ---------------------------------------------------------

def reshape(x: Tensor, shape: tuple) -> Tensor:
    src = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; the default swaps the last two."""
    if axes is None:
        axes = list(range(x.ndim))
        axes[-2], axes[-1] = axes[-1], axes[-2]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def getitem(x: Tensor, index) -> Tensor:
    src_shape, dtype = x.shape, x.dtype

    def bw(g):
        out = np.zeros(src_shape, dtype=dtype)
        np.add.at(out, index, g)
        return (out,)

    return _result(x.data[index], (x,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors,
                   lambda g: tuple(np.split(g, splits, axis=axis)))


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _result(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return scale(tsum(x, axis, keepdims), 1.0 / n)


# -- linear algebra ----------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    Leading batch axes must agree, except that a 2-D operand is shared
    across every batch entry of the other operand.
    """
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    if a.ndim > 2 and b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch extents differ, {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _result(ad @ bd, (a, b), bw)


def affine(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``weight @ x + bias`` applied column-wise; x is (..., d_in, L)."""
    if x.shape[-2] != weight.shape[1]:
        raise ShapeError(f"affine: weight {weight.shape} cannot act on input {x.shape}")
    xd, wd = x.data, weight.data
    y = wd @ xd
    if bias is not None:
        y = y + bias.data[:, None]

    def bw(g):
        gx = wd.T @ g
        gw = g @ np.swapaxes(xd, -1, -2)
        if gw.ndim > 2:
            gw = gw.reshape(-1, *gw.shape[-2:]).sum(axis=0)
        if bias is None:
            return gx, gw
        gb = g.sum(axis=-1)
        if gb.ndim > 1:
            gb = gb.reshape(-1, gb.shape[-1]).sum(axis=0)
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(y, parents, bw)


# -- normalisation / probability ---------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return _result(y, (x,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def layer_norm(x: Tensor, gain: Tensor | None = None, bias: Tensor | None = None,
               axis: int = -2, eps: float = 1e-6) -> Tensor:
    """Normalise each slice along ``axis`` then apply an affine map.

    ``gain`` and ``bias`` have length ``x.shape[axis]``.
    """
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    axis = axis % x.ndim
    xd = x.data
    rn = 1.0 / xd.shape[axis]
    xc = xd - xd.sum(axis=axis, keepdims=True) * rn
    inv = 1.0 / np.sqrt((xc * xc).sum(axis=axis, keepdims=True) * rn + eps)
    xhat = xc * inv
    bshape = [1] * x.ndim
    bshape[axis] = x.shape[axis]
    gd = gain.data.reshape(bshape) if gain is not None else None
    y = xhat * gd if gd is not None else xhat.copy()
    if bias is not None:
        y = y + bias.data.reshape(bshape)
    other = tuple(i for i in range(x.ndim) if i != axis)

    def bw(g):
        gh = g * gd if gd is not None else g
        gx = inv * (gh - gh.sum(axis=axis, keepdims=True) * rn
                    - xhat * (gh * xhat).sum(axis=axis, keepdims=True) * rn)
        out = [gx]
        if gain is not None:
            out.append((g * xhat).sum(axis=other))
        if bias is not None:
            out.append(g.sum(axis=other))
        return tuple(out)

    parents = [x] + [p for p in (gain, bias) if p is not None]
    return _result(y, parents, bw)


def cross_entropy(pred: Tensor, target, mask=None, axis: int = -1) -> Tensor:
    """Mean over unmasked rows of ``-sum(target * log(pred))`` along ``axis``.

    ``target`` is a constant (one-hot or soft) array shaped like ``pred``;
    ``mask`` has the shape of ``pred`` with ``axis`` removed.
    """
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=pred.dtype)
    if t.shape != pred.shape:
        raise ShapeError(f"cross_entropy: pred {pred.shape} vs target {t.shape}")
    axis = axis % pred.ndim
    row_shape = pred.shape[:axis] + pred.shape[axis + 1:]
    m = np.ones(row_shape, dtype=pred.dtype) if mask is None else np.asarray(mask, dtype=pred.dtype)
    if m.shape != row_shape:
        raise ShapeError(f"cross_entropy: mask {m.shape} vs rows {row_shape}")
    count = m.sum()
    if count == 0:
        raise ValueError("cross_entropy: every row is masked")
    pd = pred.data
    clamped = np.maximum(pd, LOG_CLAMP)
    rows = -(t * np.log(clamped)).sum(axis=axis)
    loss = (rows * m).sum() / count
    me = np.expand_dims(m, axis)

    def bw(g):
        gp = -t / clamped * (pd >= LOG_CLAMP) * me / count
        return (gp * g,)

    return _result(np.asarray(loss, dtype=pred.dtype), (pred,), bw)


# -- convolution -------------------------------------------------------

def conv1d(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """Stride-1 'same' convolution. x is (C_in, L) or (B, C_in, L); kernel (C_out, C_in, k)."""
    k = kernel.shape[-1]
    if k % 2 == 0:
        raise ValueError(f"conv1d needs an odd kernel size for same padding, got {k}")
    if x.shape[-2] != kernel.shape[1]:
        raise ShapeError(f"conv1d: input {x.shape} has {x.shape[-2]} channels, kernel {kernel.shape} expects {kernel.shape[1]}")
    unbatched = x.ndim == 2
    xd = x.data[None] if unbatched else x.data
    pad = k // 2
    L = xd.shape[-1]
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad)))
    win = sliding_window_view(xp, k, axis=-1)  # (B, C_in, L, k)
    wd = kernel.data
    y = np.tensordot(win, wd, axes=([1, 3], [1, 2])).transpose(0, 2, 1)
    if bias is not None:
        y = y + bias.data[:, None]
    if unbatched:
        y = y[0]

    def bw(g):
        gb3 = g[None] if unbatched else g
        gw = np.einsum("bclk,bol->ock", win, gb3, optimize=True)
        gxp = np.zeros_like(xp)
        for j in range(k):
            gxp[:, :, j:j + L] += np.einsum("oc,bol->bcl", wd[:, :, j], gb3, optimize=True)
        gx = gxp[:, :, pad:pad + L]
        if unbatched:
            gx = gx[0]
        out = [gx, gw]
        if bias is not None:
            out.append(gb3.sum(axis=(0, 2)))
        return tuple(out)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _result(y, parents, bw)


# -- masking, dropout, straight-through --------------------------------

def mask_fill(x: Tensor, keep, value: float = 0.0) -> Tensor:
    """Replace entries where ``keep`` is False by a constant; keep broadcasts to x."""
    keep = np.asarray(keep, dtype=bool)
    y = np.where(keep, x.data, np.asarray(value, dtype=x.dtype))
    return _result(y, (x,), lambda g: (g * keep,))


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity at eval time or when p == 0."""
    if not training or p <= 0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return _result(x.data * keep, (x,), lambda g: (g * keep,))


def straight_through(hard, soft: Tensor) -> Tensor:
    """Forward the constant ``hard`` values, route the gradient to ``soft`` unchanged."""
    hard = np.asarray(hard, dtype=soft.dtype)
    if hard.shape != soft.shape:
        raise ShapeError(f"straight_through: hard {hard.shape} vs soft {soft.shape}")
    return _result(hard.copy(), (soft,), lambda g: (g,))


def one_hot(indices, n_classes: int, axis: int = -1, dtype=np.float64) -> np.ndarray:
    idx = np.asarray(indices)
    out = np.eye(n_classes, dtype=dtype)[idx]
    return np.moveaxis(out, -1, axis)


# -- gradient checking -------------------------------------------------

def grad_check(f: Callable[..., Tensor], inputs: Tensor | Iterable[Tensor], eps: float = 1e-5,
               reference: Callable[..., Tensor] | None = None, floor: float = 1e-8,
               numeric_inputs: Iterable[Tensor] | None = None) -> float:
    """Max relative error between backprop and central finite differences.

    ``f`` is called with no arguments and must read ``inputs`` (which are
    perturbed in place). When ``reference`` is given, the numeric side
    differentiates it instead of ``f``; this is how a straight-through
    forward is checked against its soft relaxation. ``numeric_inputs``
    pairs each input with the tensor ``reference`` actually reads, e.g. a
    higher-precision copy of the same parameters.
    """
    inputs = [inputs] if isinstance(inputs, Tensor) else list(inputs)
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    out = f()
    backward(out)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]
    numeric_f = reference or f
    targets = inputs if numeric_inputs is None else list(numeric_inputs)
    if len(targets) != len(inputs):
        raise ValueError(f"{len(targets)} numeric inputs for {len(inputs)} inputs")
    worst = 0.0
    with no_grad():
        for t, a in zip(targets, analytic):
            if t.shape != a.shape:
                raise ShapeError(f"numeric input {t.shape} does not match gradient {a.shape}")
            if not t.data.flags.c_contiguous:
                t.data = np.ascontiguousarray(t.data)
            flat = t.data.reshape(-1)
            af = a.reshape(-1)
            step = flat.dtype.type(eps)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                fp = numeric_f().data
                flat[i] = orig - step
                fm = numeric_f().data
                flat[i] = orig
                num = float((fp - fm) / (2 * step))
                err = abs(af[i] - num) / max(abs(af[i]), abs(num), floor)
                worst = max(worst, err)
    return worst
