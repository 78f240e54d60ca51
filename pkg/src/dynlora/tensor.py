"""Dense numpy-backed tensors with define-by-run reverse-mode autodiff.

Every op records its inputs and a closure that maps the output gradient to
input gradients.  ``backward`` replays the recorded nodes in exact reverse
creation order, which is a valid reverse topological order because a node can
only consume tensors created before it.

Precision defaults to float32; wrap oracle code in ``precision(np.float64)``
to get the 64-bit verification mode.

GELU uses the tanh approximation::

    gelu(x) = 0.5 * x * (1 + tanh(sqrt(2/pi) * (x + 0.044715 * x**3)))
"""

from __future__ import annotations

import contextlib
import itertools
import math
from typing import Callable, Iterable, Sequence

import numpy as np

_counter = itertools.count()
_dtype: type = np.float32
_grad_enabled = True


class DimensionError(ValueError):
    """Operand shapes do not agree."""


class LabelError(ValueError):
    """A class label is outside [0, n_classes)."""


class ContractError(RuntimeError):
    """An op was called outside its contract (e.g. backward on a non-scalar)."""


def default_dtype() -> type:
    return _dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the dtype used for newly created tensors."""
    global _dtype
    prev, _dtype = _dtype, np.dtype(dtype).type
    try:
        yield
    finally:
        _dtype = prev


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_id", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=_dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._id = next(_counter)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data.copy())

    def backward(self) -> None:
        backward(self)

    # operator sugar; the functional forms below are the real definitions
    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __sub__(self, other: Tensor) -> Tensor:
        return sub(self, other)

    def __mul__(self, other) -> Tensor:
        if isinstance(other, Tensor):
            return mul(self, other)
        return mul_scalar(self, other)

    __rmul__ = __mul__

    def __neg__(self) -> Tensor:
        return mul_scalar(self, -1.0)

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad or p._backward is not None for p in parents):
        out._parents = parents
        out._backward = backward_fn
    return out


def _needs(t: Tensor) -> bool:
    return t.requires_grad or t._backward is not None


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable leaf with requires_grad."""
    if loss.data.size != 1 or loss.ndim != 0:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t._id in nodes:
            continue
        nodes[t._id] = t
        stack.extend(t._parents)

    grads: dict[int, np.ndarray] = {loss._id: np.ones_like(loss.data)}
    for tid in sorted(nodes, reverse=True):
        t = nodes[tid]
        g = grads.pop(tid, None)
        if g is None:
            continue
        if t._backward is None:
            if t.requires_grad:
                t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        if t.requires_grad:
            t.grad = g.copy() if t.grad is None else t.grad + g
        for parent, pg in zip(t._parents, t._backward(g)):
            if pg is None or not _needs(parent):
                continue
            prev = grads.get(parent._id)
            grads[parent._id] = pg if prev is None else prev + pg


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# --- linear algebra ---------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of the last two axes; leading axes must be identical."""
    if a.ndim < 2 or b.ndim != a.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2) if _needs(a) else None
        gb = np.swapaxes(ad, -1, -2) @ g if _needs(b) else None
        return ga, gb

    return _make(ad @ bd, (a, b), bw)


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    orig = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(orig),))


def tile(x: Tensor, reps: int) -> Tensor:
    """Stack ``reps`` copies of ``x`` along a new leading axis."""
    out = np.broadcast_to(x.data, (reps,) + x.shape).copy()
    return _make(out, (x,), lambda g: (g.sum(axis=0),))


# --- elementwise ------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def mul_scalar(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(x.data * x.data.dtype.type(c), (x,), lambda g: (g * g.dtype.type(c),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0).astype(x.data.dtype), (x,), lambda g: (g * mask,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    xd = x.data
    dt = xd.dtype.type
    c, k = dt(_GELU_C), dt(0.044715)
    inner = c * (xd + k * xd**3)
    t = np.tanh(inner)
    out = dt(0.5) * xd * (dt(1) + t)

    def bw(g):
        dinner = c * (dt(1) + dt(3) * k * xd**2)
        return (g * (dt(0.5) * (dt(1) + t) + dt(0.5) * xd * (dt(1) - t * t) * dinner),)

    return _make(out, (x,), bw)


# --- reductions -------------------------------------------------------------

def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _make(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(x: Tensor, axis: int) -> Tensor:
    axis = axis % x.ndim
    n = x.shape[axis]
    shape = x.shape

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g, axis), shape) / g.dtype.type(n),)

    return _make(x.data.mean(axis=axis), (x,), bw)


# --- normalisation and losses ----------------------------------------------

def _softmax_np(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, max-shifted for stability."""
    if x.shape[-1] < 1:
        raise DimensionError("softmax over an empty axis")
    s = _softmax_np(x.data)

    def bw(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _make(s, (x,), bw)


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layernorm: gamma/beta {gamma.shape}/{beta.shape} vs feature dim {d}")
    xd = x.data
    dt = xd.dtype.type
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = dt(1) / np.sqrt(var + dt(eps))
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        ggam = (g * xhat).sum(axis=lead) if _needs(gamma) else None
        gbet = g.sum(axis=lead) if _needs(beta) else None
        gx = None
        if _needs(x):
            gh = g * gamma.data
            gx = rstd * (gh - gh.mean(axis=-1, keepdims=True)
                         - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, ggam, gbet

    return _make(out, (x, gamma, beta), bw)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy expects B x C logits, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"cross_entropy: {labels.shape[0] if labels.ndim else 0} labels for {n} rows")
    bad = np.flatnonzero((labels < 0) | (labels >= c))
    if bad.size:
        raise LabelError(f"label {int(labels[bad[0]])} at index {int(bad[0])} outside [0, {c})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = (logz - z[rows, labels]).mean()

    def bw(g):
        p = np.exp(z - logz[:, None])
        p[rows, labels] -= 1
        return (p * (g / p.dtype.type(n)),)

    return _make(np.asarray(loss, dtype=logits.data.dtype), (logits,), bw)


# --- gradient utilities -----------------------------------------------------

def global_grad_clip(params: Iterable[Tensor], max_norm: float) -> float:
    """Rescale all gradients so their joint L2 norm is at most ``max_norm``.

    Returns the norm measured before clipping.
    """
    params = [p for p in params if p.grad is not None]
    total = math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params))
    if total > max_norm:
        scale = max_norm / total
        for p in params:
            p.grad = p.grad * p.grad.dtype.type(scale)
    return total
