"""Dense tensors with tape-based reverse-mode differentiation.

Every op here is a plain function taking and returning :class:`Tensor`.
When a :class:`GradTape` is active and some input requires a gradient, the
op appends a backward closure to the tape; otherwise nothing is recorded
and the forward pass runs with no bookkeeping.

Data is stored as 32-bit floats unless a tensor is built explicitly with
``dtype=np.float64`` (used by the finite-difference checks); ops preserve
whatever dtype their inputs carry.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "GradTape",
    "ShapeError",
    "NonFiniteError",
    "tensor",
    "no_tape",
    "add",
    "sub",
    "mul",
    "scale",
    "sum",
    "mean",
    "reshape",
    "transpose",
    "concat",
    "matmul",
    "linear",
    "conv2d",
    "avg_pool2d",
    "upsample_nearest",
    "group_norm",
    "layer_norm",
    "silu",
    "softmax",
    "scaled_dot_product_attention",
    "residual_add",
    "mse_loss",
    "embedding",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


class Tensor:
    """An n-dimensional float array that can take part in differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = np.float32
        self.data = np.asarray(arr, dtype=dtype, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=self.requires_grad, name=self.name, dtype=self.data.dtype)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, _wrap(other, self))

    def __radd__(self, other):
        return add(_wrap(other, self), self)

    def __sub__(self, other):
        return sub(self, _wrap(other, self))

    def __rsub__(self, other):
        return sub(_wrap(other, self), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _raise_not_scalar(t: Tensor):
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


def _wrap(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=like.data.dtype)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


# --------------------------------------------------------------------------
# tape
# --------------------------------------------------------------------------

_ACTIVE: list["GradTape"] = []
_SUSPENDED = [0]


class GradTape:
    """Ordered record of executed differentiable ops.

    Use as a context manager; ops executed inside are recorded when any of
    their inputs requires a gradient. :meth:`backward` walks the record in
    exact reverse order, accumulating gradients additively at fan-out.
    """

    def __init__(self):
        self.entries: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._closed = False

    def __enter__(self) -> "GradTape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.entries)

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        """Return ``{leaf: dloss/dleaf}`` for every leaf that requires a gradient.

        Leaf gradients are also accumulated into ``leaf.grad``.
        """
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not loss.requires_grad:
            raise ValueError("loss was not produced on an active tape")
        produced = {id(out) for out, _, _ in self.entries}
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for out, inputs, fn in reversed(self.entries):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for inp, gi in zip(inputs, fn(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if key not in produced:
                    leaves[key] = inp
        result: dict[Tensor, np.ndarray] = {}
        for key, leaf in leaves.items():
            g = grads[key].astype(leaf.data.dtype, copy=False)
            leaf.grad = g if leaf.grad is None else leaf.grad + g
            result[leaf] = g
        self._closed = True
        return result


class no_tape:
    """Suspend recording on the active tape (frozen teacher passes, etc.)."""

    def __enter__(self):
        _SUSPENDED[0] += 1
        return self

    def __exit__(self, *exc):
        _SUSPENDED[0] -= 1


def _recording(inputs: Iterable[Tensor]) -> GradTape | None:
    if not _ACTIVE or _SUSPENDED[0]:
        return None
    if any(t.requires_grad for t in inputs):
        return _ACTIVE[-1]
    return None


def _emit(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], backward: Callable | None) -> Tensor:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    tape = _recording(inputs) if backward is not None else None
    out = Tensor(data, requires_grad=tape is not None, dtype=data.dtype)
    if tape is not None:
        tape.entries.append((out, inputs, backward))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# --------------------------------------------------------------------------
# elementwise and structural ops
# --------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}") from exc
    return _emit("add", data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


residual_add = add


def sub(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data - b.data
    except ValueError as exc:
        raise ShapeError(f"sub: cannot broadcast {a.shape} with {b.shape}") from exc
    return _emit("sub", data, (a, b), lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul: cannot broadcast {a.shape} with {b.shape}") from exc
    return _emit(
        "mul", data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return _emit("scale", a.data * c, (a,), lambda g: (g * c,))


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return _emit("sum", np.asarray(a.data.sum(), dtype=a.data.dtype), (a,),
                 lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean(a: Tensor) -> Tensor:
    n = a.size
    return _emit("mean", np.asarray(a.data.mean(), dtype=a.data.dtype), (a,),
                 lambda g: (np.full(a.shape, g / n, dtype=a.data.dtype),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        data = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: {a.shape} -> {tuple(shape)}") from exc
    return _emit("reshape", data, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _emit("transpose", np.ascontiguousarray(a.data.transpose(axes)), (a,),
                 lambda g: (np.ascontiguousarray(g.transpose(inverse)),))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = tuple(tensors)
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit("concat", data, tensors, backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    data = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _emit("matmul", data, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` over the last axis; weight is ``[out, in]``."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input features {x.shape[-1]} vs weight {weight.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ weight.data.T
    if bias is not None:
        out = out + bias.data
    data = out.reshape(*lead, weight.shape[0])
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(-1, weight.shape[0])
        gx = (g2 @ weight.data).reshape(x.shape)
        gw = g2.T @ x2
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _emit("linear", data, inputs, backward)


# --------------------------------------------------------------------------
# spatial ops (NCHW)
# --------------------------------------------------------------------------

def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation; weight is ``[Cout, Cin, Kh, Kw]``.

    Columns are laid out channel-major (``[Cin*Kh*Kw, N*Ho*Wo]``) and filled
    one kernel offset at a time, so the whole op is one GEMM plus Kh*Kw
    strided copies.
    """
    if x.ndim != 4:
        raise ShapeError(f"conv2d: expected NCHW input, got shape {x.shape}")
    if weight.ndim != 4:
        raise ShapeError(f"conv2d: expected [Cout, Cin, Kh, Kw] weight, got {weight.shape}")
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if cin != wcin:
        raise ShapeError(f"conv2d: input channels {cin} != weight Cin {wcin}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: bad stride {stride} / padding {padding}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {h}x{w}")
    dtype = x.data.dtype
    wmat = weight.data.reshape(cout, -1)
    xt = x.data.transpose(1, 0, 2, 3)
    if padding:
        xt = np.pad(xt, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((cin, kh, kw, n, ho, wo), dtype=dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xt[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    cols = cols.reshape(cin * kh * kw, n * ho * wo)
    out = wmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    data = np.ascontiguousarray(out.reshape(cout, n, ho, wo).transpose(1, 0, 2, 3))
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gmat = g.transpose(1, 0, 2, 3).reshape(cout, -1)
        gw = (gmat @ cols.T).reshape(weight.shape)
        gcols = (wmat.T @ gmat).reshape(cin, kh, kw, n, ho, wo)
        gxt = np.zeros((cin, n, h + 2 * padding, w + 2 * padding), dtype=dtype)
        for i in range(kh):
            for j in range(kw):
                gxt[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, i, j]
        if padding:
            gxt = gxt[:, :, padding:padding + h, padding:padding + w]
        gx = np.ascontiguousarray(gxt.transpose(1, 0, 2, 3))
        if bias is None:
            return gx, gw
        return gx, gw, gmat.sum(axis=1)

    return _emit("conv2d", data, inputs, backward)


def avg_pool2d(x: Tensor, factor: int) -> Tensor:
    if factor < 1:
        raise ShapeError(f"avg_pool2d: factor must be >= 1, got {factor}")
    n, c, h, w = x.shape
    if h % factor or w % factor:
        raise ShapeError(f"avg_pool2d: spatial dims {h}x{w} not divisible by {factor}")
    if factor == 1:
        return _emit("avg_pool2d", x.data.copy(), (x,), lambda g: (g,))
    data = x.data.reshape(n, c, h // factor, factor, w // factor, factor).mean(axis=(3, 5))
    inv = x.data.dtype.type(1.0 / (factor * factor))

    def backward(g):
        return (np.repeat(np.repeat(g * inv, factor, axis=2), factor, axis=3),)

    return _emit("avg_pool2d", data, (x,), backward)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    if factor < 1:
        raise ShapeError(f"upsample_nearest: factor must be >= 1, got {factor}")
    if x.ndim != 4:
        raise ShapeError(f"upsample_nearest: expected NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    data = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def backward(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return _emit("upsample_nearest", data, (x,), backward)


# --------------------------------------------------------------------------
# normalisation, activations, attention
# --------------------------------------------------------------------------

def _normalize_rows(xg: np.ndarray, eps: float):
    mu = xg.mean(axis=-1, keepdims=True)
    xc = xg - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    return xc * rstd, rstd


def _normalize_rows_backward(gxhat: np.ndarray, xhat: np.ndarray, rstd: np.ndarray) -> np.ndarray:
    m1 = gxhat.mean(axis=-1, keepdims=True)
    m2 = (gxhat * xhat).mean(axis=-1, keepdims=True)
    return rstd * (gxhat - m1 - xhat * m2)


def group_norm(x: Tensor, num_groups: int, weight: Tensor | None = None, bias: Tensor | None = None,
               eps: float = 1e-5) -> Tensor:
    """Group normalisation over ``(C/G, H, W)`` per sample and group."""
    if x.ndim < 2:
        raise ShapeError(f"group_norm: need at least [N, C], got {x.shape}")
    n, c = x.shape[:2]
    if num_groups < 1 or c % num_groups:
        raise ShapeError(f"group_norm: {c} channels not divisible into {num_groups} groups")
    bshape = (1, c) + (1,) * (x.ndim - 2)
    xhat_g, rstd = _normalize_rows(x.data.reshape(n, num_groups, -1), eps)
    xhat = xhat_g.reshape(x.shape)
    data = xhat
    if weight is not None:
        data = data * weight.data.reshape(bshape)
    if bias is not None:
        data = data + bias.data.reshape(bshape)
    inputs = tuple(t for t in (x, weight, bias) if t is not None)
    reduce_axes = (0,) + tuple(range(2, x.ndim))

    def backward(g):
        gxhat = g * weight.data.reshape(bshape) if weight is not None else g
        gx = _normalize_rows_backward(gxhat.reshape(n, num_groups, -1), xhat_g, rstd).reshape(x.shape)
        out = [gx]
        if weight is not None:
            out.append((g * xhat).sum(axis=reduce_axes))
        if bias is not None:
            out.append(g.sum(axis=reduce_axes))
        return tuple(out)

    return _emit("group_norm", data, inputs, backward)


def layer_norm(x: Tensor, weight: Tensor | None = None, bias: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis."""
    c = x.shape[-1]
    for p in (weight, bias):
        if p is not None and p.shape != (c,):
            raise ShapeError(f"layer_norm: affine shape {p.shape} != ({c},)")
    xhat, rstd = _normalize_rows(x.data, eps)
    data = xhat
    if weight is not None:
        data = data * weight.data
    if bias is not None:
        data = data + bias.data
    inputs = tuple(t for t in (x, weight, bias) if t is not None)
    reduce_axes = tuple(range(x.ndim - 1))

    def backward(g):
        gxhat = g * weight.data if weight is not None else g
        out = [_normalize_rows_backward(gxhat, xhat, rstd)]
        if weight is not None:
            out.append((g * xhat).sum(axis=reduce_axes))
        if bias is not None:
            out.append(g.sum(axis=reduce_axes))
        return tuple(out)

    return _emit("layer_norm", data, inputs, backward)


def silu(x: Tensor) -> Tensor:
    sig = 1.0 / (1.0 + np.exp(-np.clip(x.data, -80.0, 80.0)))
    data = x.data * sig

    def backward(g):
        return (g * (sig * (1.0 + x.data * (1.0 - sig))),)

    return _emit("silu", data, (x,), backward)


def _softmax(z: np.ndarray, axis: int) -> np.ndarray:
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    p = _softmax(x.data, axis)

    def backward(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", p, (x,), backward)


def scaled_dot_product_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """``softmax(q k^T / sqrt(d)) v`` over the last two axes."""
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"attention: query dim {q.shape[-1]} != key dim {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention: {k.shape[-2]} keys but {v.shape[-2]} values")
    s = q.data.dtype.type(1.0 / math.sqrt(q.shape[-1]))
    kt = np.swapaxes(k.data, -1, -2)
    p = _softmax(np.matmul(q.data, kt) * s, -1)
    data = np.matmul(p, v.data)

    def backward(g):
        gv = np.matmul(np.swapaxes(p, -1, -2), g)
        gp = np.matmul(g, np.swapaxes(v.data, -1, -2))
        gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True)) * s
        gq = np.matmul(gs, k.data)
        gk = np.matmul(np.swapaxes(gs, -1, -2), q.data)
        return gq, gk, gv

    return _emit("attention", data, (q, k, v), backward)


def mse_loss(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mse_loss: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size
    data = np.asarray((diff * diff).mean(), dtype=a.data.dtype)

    def backward(g):
        gd = (2.0 / n) * g * diff
        return gd, -gd

    return _emit("mse_loss", data, (a, b), backward)


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]``; gradients scatter-add back into the table."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding: ids out of range for table with {table.shape[0]} rows")
    data = table.data[ids]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _emit("embedding", data, (table,), backward)
