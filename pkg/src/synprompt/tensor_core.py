"""Dense float64 tensors with tape-based reverse-mode differentiation.

A :class:`DiffValue` holds a numpy array and a gradient accumulator. Operations
executed while a :class:`Tape` is active, and with at least one input that
requires a gradient, are recorded on that tape; everything else is a constant.
Frozen weights (``requires_grad=False``) therefore cost nothing in the
backward pass beyond the input gradients that flow through them.

Broadcasting is deliberately narrow. The second operand of a binary op may be

* the same shape,
* a scalar,
* a row vector of the trailing extent (``(d,)``), or
* a batch of row vectors (``(..., 1, d)``) broadcast over the row axis.

Anything else raises :class:`DimensionError`.
"""

from __future__ import annotations

import math
import threading
import weakref
from typing import Callable, Iterable, Sequence

import numpy as np

try:  # vectorised erf kernel; several times faster than scipy's
    import torch as _torch

    _torch.set_num_threads(1)

    def _erf(x: np.ndarray) -> np.ndarray:
        return _torch.erf(_torch.from_numpy(np.asarray(x, order="C"))).numpy()

except ImportError:  # pragma: no cover
    from scipy.special import erf as _erf

DTYPE = np.float64
_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """A precondition of an operation was violated."""


class DiffValue:
    """A dense real tensor with a gradient accumulator."""

    __slots__ = ("data", "_grad", "requires_grad", "name", "node_id", "_tape")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=DTYPE)
        if arr.ndim > 3:
            raise DimensionError(f"at most 3 axes are supported, got shape {arr.shape}")
        self.data = arr
        self._grad = None
        self.requires_grad = requires_grad
        self.name = name
        self.node_id: int | None = None
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            return np.zeros_like(self.data)
        return self._grad

    def zero_grad(self) -> None:
        self._grad = None

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"DiffValue(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_value(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class _Node:
    __slots__ = ("output", "inputs", "backward_fn")

    def __init__(self, output, inputs, backward_fn):
        self.output = output
        self.inputs = inputs
        self.backward_fn = backward_fn


_local = threading.local()


def active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Ordered record of primitive applications.

    Use as a context manager; tapes are confined to the thread that opened them.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: DiffValue) -> None:
        backward(self, loss)


def _as_value(x) -> DiffValue:
    if isinstance(x, DiffValue):
        return x
    return DiffValue(x)


def _record(out: np.ndarray, inputs: Sequence[DiffValue], backward_fn: Callable) -> DiffValue:
    """Wrap ``out``; record it if a tape is active and any input needs a gradient."""
    tape = active_tape()
    if tape is None or not any(x.requires_grad for x in inputs):
        return DiffValue(out)
    value = DiffValue(out, requires_grad=True)
    value.node_id = len(tape.nodes)
    value._tape = weakref.ref(tape)
    tape.nodes.append(_Node(value, tuple(inputs), backward_fn))
    return value


def backward(tape: Tape, loss: DiffValue) -> None:
    """Accumulate d(loss)/d(value) into ``.grad`` of every value reachable on ``tape``.

    Gradients are computed in a scratch table and then added to the existing
    accumulators, so running twice without zeroing doubles every gradient.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    owner = loss._tape() if loss._tape is not None else None
    if loss._tape is not None and owner is not tape:
        raise ContractError("loss was recorded on a different tape")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any value that requires a gradient")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    touched: dict[int, DiffValue] = {id(loss): loss}
    stop = loss.node_id + 1 if owner is tape else 0
    for node in reversed(tape.nodes[:stop]):
        g = grads.get(id(node.output))
        if g is None:
            continue
        needs = tuple(x.requires_grad for x in node.inputs)
        input_grads = node.backward_fn(g, needs)
        for x, gx in zip(node.inputs, input_grads):
            if gx is None or not x.requires_grad:
                continue
            key = id(x)
            if key in grads:
                grads[key] = grads[key] + gx
            else:
                grads[key] = gx
                touched[key] = x
    for key, value in touched.items():
        g = grads[key]
        value._grad = g if value._grad is None else value._grad + g


def zero_grads(values: Iterable[DiffValue]) -> None:
    for v in values:
        v.zero_grad()


# ---------------------------------------------------------------------------
# broadcasting helpers


def _check_broadcast(big: tuple, small: tuple, op: str) -> None:
    if small == big or small == ():
        return
    if len(small) == 1 and big and small[0] == big[-1]:
        return
    if (
        len(small) == len(big) >= 2
        and small[-2] == 1
        and small[-1] == big[-1]
        and small[:-2] == big[:-2]
    ):
        return
    raise DimensionError(f"{op}: cannot broadcast shape {small} against {big}")


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    if len(shape) == 1:
        return g.reshape(-1, shape[0]).sum(axis=0)
    return g.sum(axis=-2, keepdims=True)


def _binary_shapes(a: DiffValue, b: DiffValue, op: str) -> None:
    if a.data.size >= b.data.size:
        _check_broadcast(a.shape, b.shape, op)
    else:
        _check_broadcast(b.shape, a.shape, op)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> DiffValue:
    a, b = _as_value(a), _as_value(b)
    _binary_shapes(a, b, "add")
    out = a.data + b.data
    sa, sb = a.shape, b.shape

    def bwd(g, needs):
        return (
            _reduce_to(g, sa) if needs[0] else None,
            _reduce_to(g, sb) if needs[1] else None,
        )

    return _record(out, (a, b), bwd)


def sub(a, b) -> DiffValue:
    a, b = _as_value(a), _as_value(b)
    _binary_shapes(a, b, "sub")
    out = a.data - b.data
    sa, sb = a.shape, b.shape

    def bwd(g, needs):
        return (
            _reduce_to(g, sa) if needs[0] else None,
            -_reduce_to(g, sb) if needs[1] else None,
        )

    return _record(out, (a, b), bwd)


def mul(a, b) -> DiffValue:
    a, b = _as_value(a), _as_value(b)
    _binary_shapes(a, b, "mul")
    ad, bd = a.data, b.data
    out = ad * bd

    def bwd(g, needs):
        return (
            _reduce_to(g * bd, ad.shape) if needs[0] else None,
            _reduce_to(g * ad, bd.shape) if needs[1] else None,
        )

    return _record(out, (a, b), bwd)


def scale(a: DiffValue, c: float) -> DiffValue:
    """Multiply by a fixed Python scalar (not differentiated)."""
    c = float(c)

    def bwd(g, needs):
        return (g * c,)

    return _record(a.data * c, (a,), bwd)


# ---------------------------------------------------------------------------
# linear algebra and shape ops


def matmul(a: DiffValue, b: DiffValue) -> DiffValue:
    """Matrix product.

    Supported forms: [m,k]@[k,n], [B,m,k]@[k,n] (shared right operand) and
    [B,m,k]@[B,k,n].
    """
    ad, bd = a.data, b.data
    ok = (
        ad.ndim in (2, 3)
        and bd.ndim in (2, 3)
        and ad.shape[-1] == bd.shape[-2]
        and not (ad.ndim == 2 and bd.ndim == 3)
        and not (ad.ndim == 3 and bd.ndim == 3 and ad.shape[0] != bd.shape[0])
    )
    if not ok:
        raise DimensionError(f"matmul: shapes {ad.shape} and {bd.shape} are not aligned")
    out = ad @ bd

    def bwd(g, needs):
        ga = gb = None
        if needs[0]:
            ga = g @ np.swapaxes(bd, -1, -2)
        if needs[1]:
            if ad.ndim == 3 and bd.ndim == 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _record(out, (a, b), bwd)


def linear(x: DiffValue, w: DiffValue, b: DiffValue | None = None) -> DiffValue:
    """``x @ w + b`` for x of shape [..., k], w [k, n], b [n] (fused matmul and bias)."""
    xd, wd = x.data, w.data
    if wd.ndim != 2 or xd.ndim not in (2, 3) or xd.shape[-1] != wd.shape[0]:
        raise DimensionError(f"linear: shapes {xd.shape} and {wd.shape} are not aligned")
    if b is not None and b.shape != (wd.shape[1],):
        raise DimensionError(f"linear: bias shape {b.shape} does not match output width {wd.shape[1]}")
    x2 = xd.reshape(-1, xd.shape[-1])  # one large GEMM beats a batch of small ones
    out = x2 @ wd
    if b is not None:
        out += b.data
    out = out.reshape(xd.shape[:-1] + (wd.shape[1],))
    inputs = (x, w) if b is None else (x, w, b)

    def bwd(g, needs):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ wd.T).reshape(xd.shape) if needs[0] else None
        gw = x2.T @ g2 if needs[1] else None
        if b is None:
            return gx, gw
        return gx, gw, (g2.sum(axis=0) if needs[2] else None)

    return _record(out, inputs, bwd)


def transpose(a: DiffValue) -> DiffValue:
    """Swap the last two axes."""

    def bwd(g, needs):
        return (np.swapaxes(g, -1, -2),)

    return _record(np.swapaxes(a.data, -1, -2), (a,), bwd)


def reshape(a: DiffValue, shape: Sequence[int]) -> DiffValue:
    old = a.shape

    def bwd(g, needs):
        return (g.reshape(old),)

    return _record(a.data.reshape(shape), (a,), bwd)


def split_heads(x: DiffValue, heads: int) -> DiffValue:
    """[B, L, d] -> [B*heads, L, d/heads]."""
    b, n, d = x.shape
    if d % heads:
        raise DimensionError(f"split_heads: width {d} not divisible by {heads} heads")
    dh = d // heads
    out = x.data.reshape(b, n, heads, dh).transpose(0, 2, 1, 3).reshape(b * heads, n, dh)

    def bwd(g, needs):
        return (g.reshape(b, heads, n, dh).transpose(0, 2, 1, 3).reshape(b, n, d),)

    return _record(out, (x,), bwd)


def merge_heads(x: DiffValue, heads: int) -> DiffValue:
    """[B*heads, L, dh] -> [B, L, heads*dh]."""
    bh, n, dh = x.shape
    b = bh // heads
    out = x.data.reshape(b, heads, n, dh).transpose(0, 2, 1, 3).reshape(b, n, heads * dh)

    def bwd(g, needs):
        return (g.reshape(b, n, heads, dh).transpose(0, 2, 1, 3).reshape(bh, n, dh),)

    return _record(out, (x,), bwd)


def concat(values: Sequence[DiffValue], axis: int = -1) -> DiffValue:
    values = [_as_value(v) for v in values]
    ax = axis % values[0].ndim
    out = np.concatenate([v.data for v in values], axis=ax)
    bounds = np.cumsum([0] + [v.shape[ax] for v in values])

    def bwd(g, needs):
        res = []
        for i, need in enumerate(needs):
            if not need:
                res.append(None)
                continue
            idx = [slice(None)] * g.ndim
            idx[ax] = slice(bounds[i], bounds[i + 1])
            res.append(g[tuple(idx)])
        return tuple(res)

    return _record(out, values, bwd)


def take(a: DiffValue, start: int, stop: int, axis: int = 1) -> DiffValue:
    """Contiguous slice ``[start:stop]`` along ``axis``."""
    ax = axis % a.ndim
    idx = [slice(None)] * a.ndim
    idx[ax] = slice(start, stop)
    idx = tuple(idx)
    shape = a.shape

    def bwd(g, needs):
        full = np.zeros(shape, dtype=DTYPE)
        full[idx] = g
        return (full,)

    return _record(a.data[idx], (a,), bwd)


def gather(table: DiffValue, index) -> DiffValue:
    """Rows of ``table`` selected along axis 0 by an integer array."""
    index = np.asarray(index, dtype=np.int64)
    n = table.shape[0]
    if index.size and (index.min() < 0 or index.max() >= n):
        bad = int(np.flatnonzero((index.ravel() < 0) | (index.ravel() >= n))[0])
        raise ContractError(f"gather: index {int(index.ravel()[bad])} out of range [0, {n})")
    out = table.data[index]
    if out.ndim > 3:
        raise DimensionError(f"gather: result would have shape {out.shape}")
    shape = table.shape

    def bwd(g, needs):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full, index, g)
        return (full,)

    return _record(out, (table,), bwd)


def sum(a: DiffValue, axis: int | None = None) -> DiffValue:  # noqa: A001
    shape = a.shape
    out = a.data.sum() if axis is None else a.data.sum(axis=axis)

    def bwd(g, needs):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _record(np.asarray(out), (a,), bwd)


def mean(a: DiffValue, axis: int | None = None) -> DiffValue:
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum(a, axis), 1.0 / n)


# ---------------------------------------------------------------------------
# nonlinearities


def relu(x: DiffValue) -> DiffValue:
    mask = x.data > 0

    def bwd(g, needs):
        return (g * mask,)

    return _record(np.where(mask, x.data, 0.0), (x,), bwd)


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# Closest doubles to 0 and 1 inside the open interval. Exact 1/(1+e^-x) rounds
# to 1.0 once x > ~36.7; clamping keeps the output strictly inside (0, 1).
_SIG_LO = np.nextafter(0.0, 1.0)
_SIG_HI = np.nextafter(1.0, 0.0)


def sigmoid(x: DiffValue) -> DiffValue:
    s = np.clip(_stable_sigmoid(x.data), _SIG_LO, _SIG_HI)

    def bwd(g, needs):
        return (g * s * (1.0 - s),)

    return _record(s, (x,), bwd)


def gelu(x: DiffValue) -> DiffValue:
    """Exact GeLU, x * Phi(x)."""
    xd = x.data
    cdf = _erf(xd * (1.0 / _SQRT2))
    cdf += 1.0
    cdf *= 0.5

    def bwd(g, needs):
        d = xd * xd
        d *= -0.5
        np.exp(d, out=d)
        d *= xd
        d *= _INV_SQRT_2PI
        d += cdf
        d *= g
        return (d,)

    return _record(xd * cdf, (x,), bwd)


def softmax(x: DiffValue) -> DiffValue:
    """Softmax over the last axis."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def bwd(g, needs):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _record(p, (x,), bwd)


def layer_norm(x: DiffValue, gamma: DiffValue, beta: DiffValue, eps: float = 1e-5) -> DiffValue:
    """Per-row normalisation over the last axis with population variance."""
    if eps <= 0:
        raise ContractError("layer_norm: eps must be positive")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(
            f"layer_norm: gamma {gamma.shape} / beta {beta.shape} do not match width {d}"
        )
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    out = xhat * gd + beta.data

    def bwd(g, needs):
        gx = ggamma = gbeta = None
        if needs[0]:
            gh = g * gd
            gx = inv * (
                gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
            )
        if needs[1]:
            ggamma = (g * xhat).reshape(-1, d).sum(axis=0)
        if needs[2]:
            gbeta = g.reshape(-1, d).sum(axis=0)
        return gx, ggamma, gbeta

    return _record(out, (x, gamma, beta), bwd)


# ---------------------------------------------------------------------------
# fused losses (mean over all entries / samples)


def softmax_cross_entropy(logits: DiffValue, labels) -> DiffValue:
    """Mean categorical cross-entropy; ``labels`` are integer class ids [B]."""
    labels = np.asarray(labels, dtype=np.int64)
    z = logits.data
    if z.ndim != 2 or labels.shape != (z.shape[0],):
        raise DimensionError(f"softmax_cross_entropy: logits {z.shape} vs labels {labels.shape}")
    zs = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(zs).sum(axis=-1))
    rows = np.arange(z.shape[0])
    loss = (lse - zs[rows, labels]).mean()

    def bwd(g, needs):
        p = np.exp(zs - lse[:, None])
        p[rows, labels] -= 1.0
        return (p * (g / z.shape[0]),)

    return _record(np.asarray(loss), (logits,), bwd)


def bce_with_logits(logits: DiffValue, targets) -> DiffValue:
    """Mean binary cross-entropy over every entry."""
    t = np.asarray(targets, dtype=DTYPE)
    z = logits.data
    if t.shape != z.shape:
        raise DimensionError(f"bce_with_logits: logits {z.shape} vs targets {t.shape}")
    # max(z,0) - z*t + log(1 + exp(-|z|))
    loss = (np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))).mean()

    def bwd(g, needs):
        return ((_stable_sigmoid(z) - t) * (g / z.size),)

    return _record(np.asarray(loss), (logits,), bwd)


# ---------------------------------------------------------------------------
# gradient checking


class FiniteDifferenceError(RuntimeError):
    def __init__(self, message: str, param_index: int, entry: int):
        super().__init__(message)
        self.param_index = param_index
        self.entry = entry


def finite_diff_check(
    f: Callable[[], DiffValue],
    params: Sequence[DiffValue],
    step: float = 1e-6,
    return_details: bool = False,
):
    """Compare tape gradients of ``f`` against central differences.

    ``f`` is called with no arguments and must read ``params`` directly. It is
    evaluated once under a tape for the analytic gradient, then twice per scalar
    parameter entry without a tape. Returns the maximum over all entries of
    ``|analytic - numeric| / max(1e-12, |analytic| + |numeric|)``.
    """
    if step <= 0:
        raise ContractError("finite_diff_check: step must be positive")
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        out = f()
    backward(tape, out)
    analytic = [p.grad.copy() for p in params]
    for p in params:
        p.zero_grad()

    worst = 0.0
    details = []
    for pi, p in enumerate(params):
        flat = p.data.reshape(-1)
        ga = analytic[pi].reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            fp = float(f().data)
            flat[j] = orig - step
            fm = float(f().data)
            flat[j] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise FiniteDifferenceError(
                    f"non-finite objective while perturbing parameter {pi} entry {j}", pi, j
                )
            num = (fp - fm) / (2.0 * step)
            err = abs(ga[j] - num) / max(1e-12, abs(ga[j]) + abs(num))
            if return_details:
                details.append((pi, j, ga[j], num, err))
            worst = max(worst, err)
    if return_details:
        return worst, details
    return worst
