"""Dense float64 arrays with reverse-mode automatic differentiation.

Forward math runs on numpy. While a Tape is active, every differentiable op
whose inputs need gradients appends a backward closure to it; ``backward``
replays the tape once in reverse and accumulates into Parameter gradient
buffers, so repeated backward passes are additive. A Tape is confined to the
thread that opened it.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError

_state = threading.local()


def _tapes() -> list:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = []
        _state.tapes = stack
    return stack


def active_tape():
    stack = _tapes()
    return stack[-1] if stack else None


class Array:
    """Shape-tagged float64 buffer, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "_param")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self._param = None

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Array(shape={self.data.shape}, requires_grad={self.requires_grad})"


class Parameter:
    """Named leaf array with a persistent gradient buffer of the same shape."""

    __slots__ = ("name", "value", "grad", "trainable")

    def __init__(self, name: str, value, trainable: bool = True):
        arr = np.array(value, dtype=np.float64)
        self.name = name
        self.value = Array(arr, requires_grad=trainable)
        self.value._param = self
        self.grad = np.zeros_like(arr)
        self.trainable = trainable

    def zero_grad(self):
        self.grad[...] = 0.0

    def freeze(self):
        self.trainable = False
        self.value.requires_grad = False

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.data.shape}, trainable={self.trainable})"


class Tape:
    """Ordered record of one forward pass, replayed exactly once per backward."""

    __slots__ = ("entries",)

    def __init__(self):
        self.entries = []

    def __enter__(self):
        _tapes().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tapes().pop()
        assert popped is self
        return False


def _as_array(x) -> Array:
    if isinstance(x, Parameter):
        return x.value
    if isinstance(x, Array):
        return x
    return Array(x)


def _emit(data: np.ndarray, parents: tuple, bw: Callable) -> Array:
    """Wrap op output; record on the active tape when any parent needs grads."""
    out = Array(data)
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.entries.append((out, parents, bw))
    return out


def backward(tape: Tape, loss: Array) -> None:
    """Accumulate d(loss)/d(param) into every trainable Parameter's grad."""
    if loss.data.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.data.shape}")
    adjoint = {id(loss): np.ones_like(loss.data)}
    for out, parents, bw in reversed(tape.entries):
        g = adjoint.pop(id(out), None)
        if g is None:
            continue
        for parent, gp in zip(parents, bw(g)):
            if gp is None:
                continue
            param = parent._param
            if param is not None:
                if param.trainable:
                    param.grad += gp
            else:
                key = id(parent)
                held = adjoint.get(key)
                adjoint[key] = gp if held is None else held + gp


# ---------------------------------------------------------------------------
# elementwise and broadcast ops


def constant(x) -> Array:
    return Array(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce an upstream gradient back to a broadcast operand's shape."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(op: str, a: Array, b: Array) -> None:
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise DimensionError(f"{op}: {a.data.shape} vs {b.data.shape}") from None


def add(a, b) -> Array:
    a, b = _as_array(a), _as_array(b)
    _check_broadcast("add", a, b)
    return _emit(
        a.data + b.data,
        (a, b),
        lambda g, sa=a.data.shape, sb=b.data.shape, na=a.requires_grad, nb=b.requires_grad: (
            _unbroadcast(g, sa) if na else None,
            _unbroadcast(g, sb) if nb else None,
        ),
    )


def sub(a, b) -> Array:
    a, b = _as_array(a), _as_array(b)
    _check_broadcast("sub", a, b)
    return _emit(
        a.data - b.data,
        (a, b),
        lambda g, sa=a.data.shape, sb=b.data.shape, na=a.requires_grad, nb=b.requires_grad: (
            _unbroadcast(g, sa) if na else None,
            _unbroadcast(-g, sb) if nb else None,
        ),
    )


def mul(a, b) -> Array:
    a, b = _as_array(a), _as_array(b)
    _check_broadcast("mul", a, b)
    return _emit(
        a.data * b.data,
        (a, b),
        lambda g, ad=a.data, bd=b.data, na=a.requires_grad, nb=b.requires_grad: (
            _unbroadcast(g * bd, ad.shape) if na else None,
            _unbroadcast(g * ad, bd.shape) if nb else None,
        ),
    )


def smul(a, s: float) -> Array:
    a = _as_array(a)
    s = float(s)
    return _emit(a.data * s, (a,), lambda g, s=s: (g * s,))


def sdiv(a, s: float) -> Array:
    """Divide by a scalar; rounds like true division, unlike smul(a, 1/s)."""
    a = _as_array(a)
    s = float(s)
    if s == 0.0:
        raise ContractError("sdiv by zero")
    return _emit(a.data / s, (a,), lambda g, s=s: (g / s,))


def sadd(a, s: float) -> Array:
    a = _as_array(a)
    return _emit(a.data + float(s), (a,), lambda g: (g,))


def add_vec(x, v) -> Array:
    """x + v with v broadcast over leading axes; v has x.shape[-1] entries."""
    x, v = _as_array(x), _as_array(v)
    vd = v.data.reshape(-1)
    if vd.shape[0] != x.data.shape[-1]:
        raise DimensionError(f"add_vec: {x.data.shape} vs {v.data.shape}")

    def bw(g, nx=x.requires_grad, nv=v.requires_grad, vshape=v.data.shape):
        gx = g if nx else None
        gv = g.reshape(-1, vd.shape[0]).sum(axis=0).reshape(vshape) if nv else None
        return gx, gv

    return _emit(x.data + vd, (x, v), bw)


def mul_vec(x, v) -> Array:
    """x * v with v broadcast over leading axes; v has x.shape[-1] entries."""
    x, v = _as_array(x), _as_array(v)
    vd = v.data.reshape(-1)
    if vd.shape[0] != x.data.shape[-1]:
        raise DimensionError(f"mul_vec: {x.data.shape} vs {v.data.shape}")

    def bw(g, xd=x.data, nx=x.requires_grad, nv=v.requires_grad, vshape=v.data.shape):
        gx = g * vd if nx else None
        gv = (g * xd).reshape(-1, vd.shape[0]).sum(axis=0).reshape(vshape) if nv else None
        return gx, gv

    return _emit(x.data * vd, (x, v), bw)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Array:
    """2-d or batched 3-d matrix product."""
    a, b = _as_array(a), _as_array(b)
    ad, bd = a.data, b.data
    ok = (
        ad.ndim == bd.ndim
        and ad.ndim in (2, 3)
        and ad.shape[-1] == bd.shape[-2]
        and (ad.ndim == 2 or ad.shape[0] == bd.shape[0])
    )
    if not ok:
        raise DimensionError(f"matmul: {ad.shape} x {bd.shape}")

    def bw(g, ad=ad, bd=bd, na=a.requires_grad, nb=b.requires_grad):
        ga = g @ np.swapaxes(bd, -1, -2) if na else None
        gb = np.swapaxes(ad, -1, -2) @ g if nb else None
        return ga, gb

    return _emit(ad @ bd, (a, b), bw)


def swap_last2(x) -> Array:
    x = _as_array(x)
    if x.data.ndim < 2:
        raise DimensionError(f"swap_last2: need >=2 axes, got {x.data.shape}")
    return _emit(
        np.swapaxes(x.data, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),)
    )


def permute(x, axes: Sequence[int]) -> Array:
    x = _as_array(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit(
        np.transpose(x.data, axes), (x,), lambda g, inv=inv: (np.transpose(g, inv),)
    )


def reshape(x, shape) -> Array:
    x = _as_array(x)
    old = x.data.shape
    return _emit(
        np.reshape(x.data, shape), (x,), lambda g, old=old: (np.reshape(g, old),)
    )


def concat_ax(parts: Sequence, axis: int) -> Array:
    parts = tuple(_as_array(p) for p in parts)
    sizes = [p.data.shape[axis] for p in parts]
    offs = np.cumsum([0] + sizes)

    def bw(g, offs=offs, axis=axis, flags=tuple(p.requires_grad for p in parts)):
        moved = np.moveaxis(g, axis, 0)
        return tuple(
            np.moveaxis(moved[offs[i] : offs[i + 1]], 0, axis) if flags[i] else None
            for i in range(len(flags))
        )

    return _emit(np.concatenate([p.data for p in parts], axis=axis), parts, bw)


def concat0(parts: Sequence) -> Array:
    return concat_ax(parts, 0)


def slice_ax(x, start: int, stop: int, axis: int) -> Array:
    x = _as_array(x)
    n = x.data.shape[axis]
    if not 0 <= start < stop <= n:
        raise DimensionError(f"slice axis {axis}: [{start}:{stop}] of axis size {n}")
    sel = (slice(None),) * (axis % x.data.ndim) + (slice(start, stop),)

    def bw(g, shape=x.data.shape, sel=sel):
        gx = np.zeros(shape)
        gx[sel] = g
        return (gx,)

    return _emit(x.data[sel].copy(), (x,), bw)


def slice0(x, start: int, stop: int) -> Array:
    return slice_ax(x, start, stop, 0)


def slice_last(x, start: int, stop: int) -> Array:
    x = _as_array(x)
    n = x.data.shape[-1]
    if not 0 <= start < stop <= n:
        raise DimensionError(f"slice_last: [{start}:{stop}] of axis size {n}")

    def bw(g, shape=x.data.shape, start=start, stop=stop):
        gx = np.zeros(shape)
        gx[..., start:stop] = g
        return (gx,)

    return _emit(x.data[..., start:stop].copy(), (x,), bw)


def concat_last(parts: Sequence) -> Array:
    parts = tuple(_as_array(p) for p in parts)
    sizes = [p.data.shape[-1] for p in parts]
    offs = np.cumsum([0] + sizes)

    def bw(g, offs=offs, flags=tuple(p.requires_grad for p in parts)):
        return tuple(
            g[..., offs[i] : offs[i + 1]] if flags[i] else None
            for i in range(len(flags))
        )

    return _emit(np.concatenate([p.data for p in parts], axis=-1), parts, bw)


# ---------------------------------------------------------------------------
# nonlinearities and norms


def softmax_rows(x) -> Array:
    """Softmax over the last axis, max-subtracted for stability."""
    x = _as_array(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def bw(g, s=s):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _emit(s, (x,), bw)


_GELU_C = np.sqrt(2.0 / np.pi)
_GELU_K = 0.044715


def gelu(x) -> Array:
    """tanh-approximation GELU."""
    x = _as_array(x)
    xd = x.data
    x2 = xd * xd
    u = _GELU_C * (xd + _GELU_K * (x2 * xd))
    th = np.tanh(u)
    y = 0.5 * xd * (1.0 + th)

    def bw(g, xd=xd, x2=x2, th=th):
        du = _GELU_C * (1.0 + 3.0 * _GELU_K * x2)
        return (g * (0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th * th) * du),)

    return _emit(y, (x,), bw)


def layer_norm(x, gain, bias, eps: float = 1e-6) -> Array:
    """Normalize rows (last axis) to zero mean, unit variance, then affine."""
    x, gain, bias = _as_array(x), _as_array(gain), _as_array(bias)
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise DimensionError(
            f"layer_norm: x {x.data.shape}, gain {gain.data.shape}, bias {bias.data.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bw(
        g,
        xhat=xhat,
        inv=inv,
        gd=gain.data,
        nx=x.requires_grad,
        ng=gain.requires_grad,
        nb=bias.requires_grad,
    ):
        gx = None
        if nx:
            gh = g * gd
            gx = inv * (
                gh
                - gh.mean(axis=-1, keepdims=True)
                - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
            )
        ggain = (g * xhat).reshape(-1, gd.shape[0]).sum(axis=0) if ng else None
        gbias = g.reshape(-1, gd.shape[0]).sum(axis=0) if nb else None
        return gx, ggain, gbias

    return _emit(out, (x, gain, bias), bw)


def embed(table, ids) -> Array:
    """Gather rows of table at integer ids; backward scatter-adds.

    ids may have any rank; the output appends the table row width.
    """
    table = _as_array(table)
    idx = np.asarray(ids, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= table.data.shape[0]):
        raise ContractError(
            f"embed: id out of range [0, {table.data.shape[0]}): {idx.tolist()}"
        )

    def bw(g, shape=table.data.shape, flat=idx.reshape(-1)):
        gt = np.zeros(shape)
        np.add.at(gt, flat, g.reshape(flat.size, shape[1]))
        return (gt,)

    return _emit(table.data[idx], (table,), bw)


def rope_pairs(x, cos: np.ndarray, sin: np.ndarray) -> Array:
    """Rotate adjacent (even, odd) feature pairs by precomputed angles.

    cos and sin are plain arrays broadcastable to x.shape[:-1] + (x.shape[-1]//2,).
    """
    x = _as_array(x)
    xd = x.data
    half = xd.shape[:-1] + (xd.shape[-1] // 2,)
    try:
        ok = xd.shape[-1] % 2 == 0 and np.broadcast_shapes(cos.shape, half) == half
    except ValueError:
        ok = False
    if not ok:
        raise DimensionError(f"rope_pairs: x {xd.shape}, cos {cos.shape}")
    xe = xd[..., 0::2]
    xo = xd[..., 1::2]
    out = np.empty_like(xd)
    out[..., 0::2] = xe * cos - xo * sin
    out[..., 1::2] = xe * sin + xo * cos

    def bw(g, cos=cos, sin=sin):
        ge = g[..., 0::2]
        go = g[..., 1::2]
        gx = np.empty_like(g)
        gx[..., 0::2] = ge * cos + go * sin
        gx[..., 1::2] = -ge * sin + go * cos
        return (gx,)

    return _emit(out, (x,), bw)


def sum_all(x) -> Array:
    x = _as_array(x)
    return _emit(
        np.asarray(x.data.sum()),
        (x,),
        lambda g, shape=x.data.shape: (np.broadcast_to(g, shape),),
    )


# ---------------------------------------------------------------------------
# gradient oracle


def finite_diff_check(f, params: Sequence[Parameter], eps: float = 1e-5) -> float:
    """Compare tape gradients of scalar f() against central differences.

    Returns the worst relative error over every scalar entry of params, with
    denominator max(|analytic|, |numeric|, 1e-8). f is re-evaluated off-tape
    for each perturbation, so it must be deterministic.
    """
    if not 0.0 < eps <= 1e-2:
        raise ContractError(f"eps must be in (0, 1e-2], got {eps}")
    for p in params:
        p.zero_grad()
    tape = Tape()
    with tape:
        loss = f()
    backward(tape, loss)
    worst = 0.0
    for p in params:
        analytic = p.grad.copy().reshape(-1)
        flat = p.value.data.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + eps
            hi = float(f().data)
            flat[i] = keep - eps
            lo = float(f().data)
            flat[i] = keep
            numeric = (hi - lo) / (2.0 * eps)
            denom = max(abs(analytic[i]), abs(numeric), 1e-8)
            worst = max(worst, abs(analytic[i] - numeric) / denom)
    return worst
