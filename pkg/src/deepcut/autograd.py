"""Dense float64 tensors with define-by-run reverse-mode differentiation.

A :class:`Tape` records every primitive executed while it is active. Calling
:func:`backward` sweeps the record once in reverse and returns gradients for
the requested leaves. Tapes are cheap and are rebuilt for every training step.

Forward primitives refuse to produce NaN or Inf; a :class:`NonFiniteError` is
raised at the offending operation instead.
"""

from __future__ import annotations

import threading
from typing import Callable, Mapping, Sequence

import numpy as np

from .rng import Rng

__all__ = [
    "DimensionError",
    "NonFiniteError",
    "Tape",
    "Tensor",
    "add",
    "backward",
    "concat",
    "dropout",
    "gelu",
    "index_rows",
    "l2_normalize",
    "layer_norm",
    "log_softmax",
    "logaddexp",
    "masked_logsumexp",
    "matmul",
    "mul",
    "reshape",
    "scale",
    "softmax",
    "sub",
    "sum",
    "take_along_last",
    "tensor",
    "tensor_matmul",
    "tensor_log_softmax",
    "transpose",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """A forward operation produced NaN or Inf."""


class Tensor:
    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    # operator sugar
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


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# tape

class _Node:
    __slots__ = ("out", "inputs", "vjp")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: Callable):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


_local = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Ordered record of primitive operations (single owner)."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: Callable) -> None:
        self.nodes.append(_Node(out, inputs, vjp))

    def sweep(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Reverse accumulation; returns gradients keyed by ``id(tensor)``."""
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.get(id(node.out))
            if g is None:
                continue
            in_grads = node.vjp(g)
            for inp, ig in zip(node.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                key = id(inp)
                prev = grads.get(key)
                grads[key] = ig if prev is None else prev + ig
        return grads


def backward(tape: Tape, loss: Tensor, wrt: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    """Gradient of a scalar ``loss`` with respect to every tensor in ``wrt``.

    Parameters the loss does not depend on get an all-zero gradient.
    """
    grads = tape.sweep(loss)
    out = {}
    for name, t in wrt.items():
        g = grads.get(id(t))
        out[name] = np.zeros_like(t.data) if g is None else np.asarray(g, dtype=np.float64)
    return out


def _make(data: np.ndarray, inputs: tuple[Tensor, ...], vjp: Callable, op: str) -> Tensor:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape = _active_tape()
        if tape is not None:
            tape.record(out, inputs, vjp)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
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
# elementwise

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a constant scalar."""
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def gelu(x: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    k = np.sqrt(2.0 / np.pi)
    xd = x.data
    sq = xd * xd
    t = np.tanh(k * xd * (1.0 + 0.044715 * sq))
    out = 0.5 * xd * (1.0 + t)

    def vjp(g):
        dinner = k * (1.0 + 3 * 0.044715 * sq)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return _make(out, (x,), vjp, "gelu")


def logaddexp(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = np.logaddexp(a.data, b.data)

    def vjp(g):
        pa = np.exp(a.data - out)
        pb = np.exp(b.data - out)
        return _unbroadcast(g * pa, a.shape), _unbroadcast(g * pb, b.shape)

    return _make(out, (a, b), vjp, "logaddexp")


# ---------------------------------------------------------------------------
# shape / indexing

def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    src = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _make(np.asarray(out), (x,), vjp, "sum")


def index_rows(table: Tensor, idx) -> Tensor:
    """``table[idx]`` along axis 0; ``idx`` may have any integer shape."""
    idx = np.asarray(idx, dtype=np.int64)
    n = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"row index out of range for table with {n} rows")
    rest = table.shape[1:]

    def vjp(g):
        out = np.zeros((n,) + rest)
        np.add.at(out, idx.reshape(-1), g.reshape((-1,) + rest))
        return (out,)

    return _make(table.data[idx], (table,), vjp, "index_rows")


def take_along_last(x: Tensor, idx) -> Tensor:
    """Pick one entry per row along the last axis: ``out[..., ] = x[..., idx]``."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.shape != x.shape[:-1]:
        raise DimensionError(f"index shape {idx.shape} does not match {x.shape[:-1]}")
    picked = np.take_along_axis(x.data, idx[..., None], axis=-1)[..., 0]
    src = x.shape

    def vjp(g):
        out = np.zeros(src)
        np.put_along_axis(out, idx[..., None], g[..., None], axis=-1)
        return (out,)

    return _make(picked, (x,), vjp, "take_along_last")


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), vjp, "concat")


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batch broadcasting over leading axes."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    if b.ndim == 2 and a.ndim > 2:
        # fold leading axes so a single 2-D BLAS call does the work
        k = ad.shape[-1]
        a2 = ad.reshape(-1, k)
        out = (a2 @ bd).reshape(ad.shape[:-1] + (bd.shape[1],))

        def vjp(g):
            g2 = g.reshape(-1, bd.shape[1])
            return (g2 @ bd.T).reshape(ad.shape), a2.T @ g2

        return _make(out, (a, b), vjp, "matmul")

    def vjp(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make(ad @ bd, (a, b), vjp, "matmul")


def tensor_matmul(a: Tensor, b: Tensor) -> Tensor:
    """Strict 2-D product ``[m, k] x [k, n] -> [m, n]``."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}")
    return matmul(a, b)


# ---------------------------------------------------------------------------
# normalisers

def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.shape[axis] == 0:
        raise DimensionError("log_softmax over an empty axis")
    xd = x.data
    shifted = xd - xd.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def vjp(g):
        p = np.exp(out)
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), vjp, "log_softmax")


tensor_log_softmax = log_softmax


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.shape[axis] == 0:
        raise DimensionError("softmax over an empty axis")
    xd = x.data
    e = np.exp(xd - xd.max(axis=axis, keepdims=True))
    p = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _make(p, (x,), vjp, "softmax")


def masked_logsumexp(x: Tensor, mask, axis: int = -1) -> Tensor:
    """log-sum-exp over entries where ``mask`` is true.

    Every reduced slice must contain at least one selected entry.
    """
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    if not mask.any(axis=axis).all():
        raise ValueError("masked_logsumexp: a slice has no selected entries")
    xd = np.where(mask, x.data, -np.inf)
    m = xd.max(axis=axis, keepdims=True)
    e = np.where(mask, np.exp(xd - m), 0.0)
    s = e.sum(axis=axis, keepdims=True)
    out = (np.log(s) + m).squeeze(axis)

    def vjp(g):
        return (np.expand_dims(g, axis) * e / s,)

    return _make(out, (x,), vjp, "masked_logsumexp")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    d = xd.shape[-1]

    def vjp(g):
        gg = _unbroadcast(g * xhat, gain.shape)
        gb = _unbroadcast(g, bias.shape)
        gx_hat = g * gain.data
        gx = inv / d * (d * gx_hat - gx_hat.sum(-1, keepdims=True)
                        - xhat * (gx_hat * xhat).sum(-1, keepdims=True))
        return gx, gg, gb

    return _make(out, (x, gain, bias), vjp, "layer_norm")


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale each row (last axis) to unit Euclidean length."""
    xd = x.data
    norm = np.sqrt((xd * xd).sum(-1, keepdims=True) + eps)
    y = xd / norm

    def vjp(g):
        return ((g - y * (g * y).sum(-1, keepdims=True)) / norm,)

    return _make(y, (x,), vjp, "l2_normalize")


# ---------------------------------------------------------------------------
# stochastic

def dropout(x: Tensor, rate: float, rng: Rng | None, train: bool = True) -> Tensor:
    """Inverted dropout; identity when ``train`` is false or ``rate`` is 0."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode needs an rng")
    keep = (rng.uniform(x.shape) >= rate) / (1.0 - rate)
    return _make(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


def leaves(arrays: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
    """Wrap named arrays as differentiable leaf tensors."""
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in arrays.items()}

