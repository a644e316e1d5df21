"""Dense-tensor core with reverse-mode automatic differentiation.

Tensors wrap numpy arrays. Operations record backward rules on an explicit
Tape; replaying the tape in reverse accumulates gradients in a fixed order,
so identical inputs always produce bit-identical gradients. Every operation
verifies its output is finite and raises NonFiniteError otherwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class NonFiniteError(ArithmeticError):
    """An operation produced NaN or Inf."""


# ---------------------------------------------------------------------------
# Tensor and Tape
# ---------------------------------------------------------------------------


class Tensor:
    """Dense n-dimensional real array, optionally attached to a Tape."""

    __slots__ = ("data", "grad", "tape", "node_id")

    def __init__(self, data, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError("tensor initialized with non-finite values")
        self.data = arr
        self.grad = None
        self.tape = None
        self.node_id = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tracked = "" if self.tape is None else f", node_id={self.node_id}"
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tracked})"

    # operator sugar; constants are wrapped untracked with matching dtype
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Topologically ordered record of operations for one backward pass."""

    __slots__ = ("_records", "_next_id", "_watched", "_consumed")

    def __init__(self):
        self._records = []
        self._next_id = 0
        self._watched = []
        self._consumed = False

    def watch(self, tensor: Tensor) -> None:
        """Register a leaf tensor so backward() will populate its grad."""
        if tensor.tape is self:
            return
        if tensor.tape is not None:
            raise ValueError("tensor is already attached to another tape")
        tensor.tape = self
        tensor.node_id = self._alloc()
        self._watched.append(tensor)

    def _alloc(self) -> int:
        nid = self._next_id
        self._next_id += 1
        return nid

    def __len__(self):
        return len(self._records)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _result(arr: np.ndarray, inputs: tuple, rule) -> Tensor:
    """Wrap an op result; record the backward rule if any input is tracked."""
    if not np.isfinite(arr).all():
        raise NonFiniteError("operation produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = arr
    out.grad = None
    tape = None
    for t in inputs:
        tp = t.tape
        if tp is not None:
            if tape is None:
                tape = tp
            elif tape is not tp:
                raise ValueError("operation inputs belong to different tapes")
    if tape is None:
        out.tape = None
        out.node_id = None
    else:
        out.tape = tape
        out.node_id = tape._alloc()
        tape._records.append(
            (out.node_id, tuple(t.node_id for t in inputs), rule)
        )
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate grad on every watched leaf by replaying the tape in reverse.

    Gradient accumulation never mutates stored buffers (contributions are
    combined with fresh allocations), so rules may safely return views.
    Consumes the tape: watched tensors are detached afterwards.
    """
    if loss.data.size != 1:
        raise ValueError("loss must be a scalar tensor")
    if tape._consumed:
        raise ValueError("tape has already been consumed by backward()")
    if loss.tape is not tape:
        raise ValueError("loss was not produced through this tape (detached graph)")
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    for out_id, in_ids, rule in reversed(tape._records):
        g = grads.pop(out_id, None)
        if g is None:
            continue
        for nid, contrib in zip(in_ids, rule(g)):
            if nid is None or contrib is None:
                continue
            acc = grads.get(nid)
            grads[nid] = contrib if acc is None else acc + contrib
    for t in tape._watched:
        g = grads.get(t.node_id)
        if g is None:
            t.grad = np.zeros_like(t.data)
        else:
            t.grad = np.ascontiguousarray(g, dtype=t.data.dtype)
        t.tape = None
        t.node_id = None
    tape._consumed = True


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a gradient back to the shape of a broadcast input."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Elementwise and structural operations
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_dtypes(a, b)
    ash, bsh = a.data.shape, b.data.shape

    def rule(g):
        return _unbroadcast(g, ash), _unbroadcast(g, bsh)

    return _result(a.data + b.data, (a, b), rule)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_dtypes(a, b)
    ash, bsh = a.data.shape, b.data.shape

    def rule(g):
        return _unbroadcast(g, ash), _unbroadcast(-g, bsh)

    return _result(a.data - b.data, (a, b), rule)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_dtypes(a, b)
    ad, bd = a.data, b.data

    def rule(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _result(ad * bd, (a, b), rule)


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar (dtype-preserving)."""
    return _result(a.data * c, (a,), lambda g: (g * c,))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    ad = a.data
    return _result(out, (a,), lambda g: (g / ad,))


def absolute(a: Tensor) -> Tensor:
    ad = a.data
    return _result(np.abs(ad), (a,), lambda g: (g * np.sign(ad),))


def huber(a: Tensor, delta: float = 1.0) -> Tensor:
    """Elementwise Huber penalty: x^2/2 inside |x|<=delta, linear outside."""
    ad = a.data
    absx = np.abs(ad)
    out = np.where(absx <= delta, 0.5 * ad * ad, delta * (absx - 0.5 * delta))

    def rule(g):
        return (g * np.clip(ad, -delta, delta),)

    return _result(out.astype(ad.dtype, copy=False), (a,), rule)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def gather_rows(a: Tensor, indices) -> Tensor:
    """Select rows of a 2-d tensor; duplicate indices accumulate in backward."""
    idx = np.asarray(indices, dtype=np.intp)
    ad = a.data

    def rule(g):
        buf = np.zeros_like(ad)
        np.add.at(buf, idx, g)
        return (buf,)

    return _result(ad[idx], (a,), rule)


def scatter_rows(values: Tensor, indices, num_rows: int) -> Tensor:
    """Place rows at the given indices of a zero-filled (num_rows, ...) tensor.

    Indices must be unique; later rows would silently overwrite earlier ones.
    """
    idx = np.asarray(indices, dtype=np.intp)
    vd = values.data
    out = np.zeros((num_rows,) + vd.shape[1:], dtype=vd.dtype)
    out[idx] = vd
    return _result(out, (values,), lambda g: (g[idx],))


def broadcast_rows(row: Tensor, n: int) -> Tensor:
    """Tile a 1-d tensor into n identical rows."""
    rd = row.data
    if rd.ndim != 1:
        raise ValueError("broadcast_rows expects a 1-d tensor")
    out = np.tile(rd, (n, 1))
    return _result(out, (row,), lambda g: (g.sum(axis=0),))


def take_scalar(a: Tensor, index: int) -> Tensor:
    """Extract one element (by flat index) as a 0-d tensor."""
    ad = a.data
    flat = ad.reshape(-1)
    i = int(index)
    if not 0 <= i < flat.size:
        raise IndexError(f"flat index {i} out of range for size {flat.size}")

    def rule(g):
        buf = np.zeros_like(ad)
        buf.reshape(-1)[i] = g
        return (buf,)

    return _result(np.asarray(flat[i]), (a,), rule)


def sum_all(a: Tensor) -> Tensor:
    sh = a.data.shape
    return _result(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, sh),))


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    sh = a.data.shape
    out = np.asarray(a.data.sum() / n)

    def rule(g):
        return (np.broadcast_to(g / n, sh),)

    return _result(out.astype(a.dtype, copy=False), (a,), rule)


def mean_axis(a: Tensor, axis: int) -> Tensor:
    n = a.data.shape[axis]
    sh = a.data.shape

    def rule(g):
        return (np.broadcast_to(np.expand_dims(g / n, axis), sh),)

    return _result(a.data.mean(axis=axis), (a,), rule)


# ---------------------------------------------------------------------------
# Neural-network operations
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; supports 2-d, or 3-d with equal leading (batch) dims."""
    _check_dtypes(a, b)
    ad, bd = a.data, b.data
    if ad.ndim != bd.ndim or ad.ndim not in (2, 3):
        raise ValueError(f"matmul rank mismatch: {ad.shape} @ {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ValueError(f"matmul inner dimension mismatch: {ad.shape} @ {bd.shape}")
    if ad.ndim == 3 and ad.shape[0] != bd.shape[0]:
        raise ValueError(f"matmul batch dimension mismatch: {ad.shape} @ {bd.shape}")

    def rule(g):
        return g @ bd.swapaxes(-1, -2), ad.swapaxes(-1, -2) @ g

    return _result(ad @ bd, (a, b), rule)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Stable softmax along an axis; rows are nonnegative and sum to 1."""
    xd = x.data
    if not -xd.ndim <= axis < xd.ndim:
        raise ValueError(f"softmax axis {axis} invalid for shape {xd.shape}")
    shifted = xd - xd.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        dot = (out * g).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _result(out, (x,), rule)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean / unit population variance, then
    apply the gamma/beta affine."""
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    xd, gd, bd = x.data, gamma.data, beta.data
    d = xd.shape[-1]
    if gd.shape != (d,) or bd.shape != (d,):
        raise ValueError(f"layer_norm affine shape mismatch: x has D={d}, "
                         f"gamma {gd.shape}, beta {bd.shape}")
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gd + bd

    def rule(g):
        lead = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=lead)
        gbeta = g.sum(axis=lead)
        gxh = g * gd
        gx = inv * (gxh - gxh.mean(axis=-1, keepdims=True)
                    - xhat * (gxh * xhat).mean(axis=-1, keepdims=True))
        return gx, ggamma, gbeta

    return _result(out, (x, gamma, beta), rule)


_GELU_K = math.sqrt(2.0 / math.pi)
_GELU_C = 0.044715


def gelu(x: Tensor) -> Tensor:
    """tanh-approximation GELU: 0.5*x*(1 + tanh(k*(x + 0.044715*x^3)))."""
    xd = x.data
    u = _GELU_K * (xd + _GELU_C * xd ** 3)
    t = np.tanh(u)
    out = 0.5 * xd * (1.0 + t)

    def rule(g):
        du = _GELU_K * (1.0 + 3.0 * _GELU_C * xd * xd)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * du),)

    return _result(out, (x,), rule)


def _check_dtypes(a: Tensor, b: Tensor) -> None:
    if a.data.dtype != b.data.dtype:
        raise ValueError(f"mixed dtypes {a.data.dtype} and {b.data.dtype}; "
                         "cast inputs to a common precision first")


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


@dataclass
class OptimState:
    """AdamW moments, keyed like the parameter dict, plus the step counter."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def for_params(cls, params: dict[str, Tensor]) -> "OptimState":
        return cls(
            m={k: np.zeros_like(p.data) for k, p in params.items()},
            v={k: np.zeros_like(p.data) for k, p in params.items()},
            t=0,
        )


def adamw_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: OptimState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.95,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> None:
    """One bias-corrected AdamW update, in place.

    Decoupled weight decay shrinks the parameter before the Adam delta is
    applied. Iteration order is the dict order of `params`, so repeated calls
    with identical inputs are bit-deterministic.
    """
    if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
        raise ValueError("betas must lie in [0, 1)")
    state.t += 1
    t = state.t
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape mismatch for '{name}': "
                             f"{g.shape} vs {p.data.shape}")
        if weight_decay != 0.0:
            p.data *= 1.0 - lr * weight_decay
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


# ---------------------------------------------------------------------------
# Gradient verification
# ---------------------------------------------------------------------------


def finite_diff_check(f, params: list[Tensor], eps: float = 1e-5) -> float:
    """Max relative error between backward() gradients and central differences.

    `f(params)` must return a scalar Tensor and be deterministic; parameters
    must be float64. The error metric per coordinate is
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    """
    if eps <= 0:
        raise ValueError("finite-difference step eps must be positive")
    for p in params:
        if p.data.dtype != np.float64:
            raise ValueError("finite_diff_check requires float64 parameters")
    v1 = float(f(params).data)
    v2 = float(f(params).data)
    if v1 != v2:
        raise ValueError("f is not deterministic; gradient check is meaningless")

    tape = Tape()
    for p in params:
        tape.watch(p)
    backward(f(params), tape)
    analytic = [p.grad.copy() for p in params]

    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f(params).data)
            flat[i] = orig - eps
            fm = float(f(params).data)
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * eps)
            a = gflat[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            if err > worst:
                worst = err
    return worst
