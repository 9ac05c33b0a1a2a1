"""Dense float32 tensors with a record-then-reverse autodiff tape.

Operations record onto the innermost active :class:`Tape`. With no tape
active (or no input requiring gradients) they run as plain numpy and
record nothing, which is how inference runs.

    >>> w = Tensor([[1.0, 2.0]], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = mean(matmul(w, Tensor([[3.0], [4.0]])))
    >>> tape.backward(loss)
    >>> w.grad.tolist()
    [[3.0, 4.0]]
"""
from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

DTYPE = np.float32


class DimensionError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class TapeError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node_id", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        arr = np.asarray(data, dtype=DTYPE)
        if arr.dtype != DTYPE:
            arr = arr.astype(DTYPE)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.node_id: Optional[int] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# tape


@dataclass
class Node:
    kind: str
    inputs: tuple
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class Tape:
    """Ordered record of differentiable operations; single use."""

    nodes: list = field(default_factory=list)
    consumed: bool = False

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def record(self, kind, inputs, output, backward) -> None:
        if self.consumed:
            raise TapeError("tape already consumed by backward()")
        output.node_id = len(self.nodes)
        self.nodes.append(Node(kind, tuple(inputs), output, backward))

    def backward(self, loss: Tensor, grad=None) -> None:
        if self.consumed:
            raise TapeError("backward() already ran on this tape; record a new one")
        self.consumed = True
        if grad is None:
            if loss.data.size != 1:
                raise DimensionError("backward() without seed gradient needs a scalar loss")
            grad = np.ones_like(loss.data)
        grad = np.asarray(grad, dtype=DTYPE)
        if grad.shape != loss.shape:
            raise DimensionError(f"seed gradient {grad.shape} vs loss {loss.shape}")
        _accumulate(loss, grad)
        for node in reversed(self.nodes):
            g = node.output.grad
            if g is None:
                continue
            in_grads = node.backward(g)
            for inp, ig in zip(node.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                _accumulate(inp, ig)
        self.nodes.clear()


_local = threading.local()


def _stack() -> list:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def active_tape() -> Optional[Tape]:
    st = _stack()
    return st[-1] if st else None


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if g.shape != t.shape:
        raise DimensionError(f"gradient shape {g.shape} does not match tensor {t.shape}")
    g = g.astype(DTYPE, copy=False)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


def _finish(kind: str, value: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    value = np.asarray(value, dtype=DTYPE)
    if not np.isfinite(value).all():
        raise NumericError(f"{kind} produced non-finite values")
    tape = active_tape()
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(value, requires_grad=needs and tape is not None)
    if out.requires_grad:
        tape.record(kind, inputs, out, backward)
    return out


def _check_finite(kind: str, *ts: Tensor) -> None:
    for t in ts:
        if not np.isfinite(t.data).all():
            raise NumericError(f"{kind} received non-finite input")


# ---------------------------------------------------------------------------
# elementwise


def _bcast_ok(big: tuple, small: tuple) -> bool:
    if big == small:
        return True
    if len(small) == 1 and small[0] == big[-1]:
        return True  # row vector / bias
    if len(small) == len(big):
        return all(s == 1 or s == b for s, b in zip(small, big))
    return False


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 1:
        return g.reshape(-1, shape[0]).sum(axis=0)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    return g.sum(axis=axes, keepdims=True)


def _binary_shape(kind: str, a: Tensor, b: Tensor) -> None:
    if not (_bcast_ok(a.shape, b.shape) or _bcast_ok(b.shape, a.shape)):
        raise DimensionError(f"{kind}: incompatible shapes {a.shape} and {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _binary_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _finish("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _binary_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _finish("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _binary_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _finish("mul", ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a: Tensor, b: Tensor) -> Tensor:
    _binary_shape("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return _finish("div", out, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _finish("scale", a.data * DTYPE(c), (a,), lambda g: (g * DTYPE(c),))


def identity(a: Tensor) -> Tensor:
    return _finish("identity", a.data.copy(), (a,), lambda g: (g,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th ** 2) * dinner),)

    return _finish("gelu", out, (a,), backward)


ACTIVATIONS = {"gelu": gelu, "identity": identity}


def activation(a: Tensor, kind: str) -> Tensor:
    try:
        fn = ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None
    return fn(a)


# ---------------------------------------------------------------------------
# linear algebra and shape


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(..., m, k) @ (..., k, n). Leading batch extents must agree exactly."""
    if a.ndim < 2 or b.ndim < 2 or a.ndim != b.ndim:
        raise DimensionError(f"matmul: need equal-rank >=2D operands, got {a.shape}, {b.shape}")
    if a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shape mismatch {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _finish("matmul", ad @ bd, (a, b), backward)


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Affine map over the last axis; x (..., i), w (i, o), b (o,)."""
    lead = x.shape[:-1]
    y = matmul(reshape(x, (-1, x.shape[-1])), w)
    if b is not None:
        y = add(y, b)
    return reshape(y, lead + (w.shape[-1],))


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as e:
        raise DimensionError(str(e)) from None
    return _finish("reshape", out, (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes=None) -> Tensor:
    """Permute axes; default swaps the last two."""
    if axes is None:
        axes = list(range(a.ndim))
        axes[-2], axes[-1] = axes[-1], axes[-2]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _finish("transpose", np.transpose(a.data, axes), (a,),
                   lambda g: (np.transpose(g, inv),))


def concat(ts: Sequence[Tensor], axis: int = -1) -> Tensor:
    ts = list(ts)
    ax = axis % ts[0].ndim
    for t in ts[1:]:
        if t.ndim != ts[0].ndim or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, ts[0].shape)) if i != ax
        ):
            raise DimensionError(f"concat: incompatible shapes {[t.shape for t in ts]}")
    bounds = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _finish("concat", np.concatenate([t.data for t in ts], axis=ax), ts, backward)


def take(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Slice by an index list along one axis (repeats allowed)."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < -a.shape[axis] or idx.max() >= a.shape[axis]):
        raise IndexError(f"take: index out of range for axis of size {a.shape[axis]}")
    ax = axis % a.ndim
    src = a.shape

    def backward(g):
        out = np.zeros(src, dtype=DTYPE)
        moved = np.moveaxis(out, ax, 0)
        np.add.at(moved, idx, np.moveaxis(g, ax, 0))
        return (out,)

    return _finish("take", np.take(a.data, idx, axis=ax), (a,), backward)


def narrow(a: Tensor, start: int, stop: int, axis: int = 0) -> Tensor:
    """Contiguous slice [start, stop) along one axis."""
    ax = axis % a.ndim
    if not 0 <= start <= stop <= a.shape[ax]:
        raise IndexError(f"narrow: [{start}, {stop}) outside axis of size {a.shape[ax]}")
    sl = (slice(None),) * ax + (slice(start, stop),)
    src = a.shape

    def backward(g):
        out = np.zeros(src, dtype=DTYPE)
        out[sl] = g
        return (out,)

    return _finish("narrow", a.data[sl], (a,), backward)


def gather(a: Tensor, indices) -> Tensor:
    """Per-batch row gather: a (B, L, ...), indices (B, K) -> (B, K, ...)."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 2 or idx.shape[0] != a.shape[0]:
        raise DimensionError(f"gather: indices {idx.shape} vs tensor {a.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[1]):
        raise IndexError("gather: index out of range")
    rows = np.arange(a.shape[0])[:, None]
    src = a.shape

    def backward(g):
        out = np.zeros(src, dtype=DTYPE)
        np.add.at(out, (rows, idx), g)
        return (out,)

    return _finish("gather", a.data[rows, idx], (a,), backward)


def expand(a: Tensor, axis: int, size: int) -> Tensor:
    """Repeat a size-1 axis ``size`` times."""
    if a.shape[axis] != 1:
        raise DimensionError(f"expand: axis {axis} has extent {a.shape[axis]}, need 1")
    ax = axis % a.ndim
    return _finish("expand", np.repeat(a.data, size, axis=ax), (a,),
                   lambda g: (g.sum(axis=ax, keepdims=True),))


# ---------------------------------------------------------------------------
# reductions and normalisation


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _finish("sum", a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def max_(a: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Max along an axis; gradient routes to the first maximal entry."""
    ax = axis % a.ndim
    arg = np.argmax(a.data, axis=ax)
    out = np.take_along_axis(a.data, np.expand_dims(arg, ax), axis=ax)
    src = a.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        res = np.zeros(src, dtype=DTYPE)
        np.put_along_axis(res, np.expand_dims(arg, ax), g, axis=ax)
        return (res,)

    if not keepdims:
        out = np.squeeze(out, axis=ax)
    return _finish("max", out, (a,), backward)


def min_(a: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    return scale(max_(scale(a, -1.0), axis=axis, keepdims=keepdims), -1.0)


def softmax_rows(a: Tensor) -> Tensor:
    """Softmax over the last axis, stabilised by row-max subtraction."""
    _check_finite("softmax_rows", a)
    x = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(x)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _finish("softmax", p, (a,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis, then apply per-channel gain and bias."""
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"layer_norm: params {gamma.shape}/{beta.shape} vs width {c}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data

    def backward(g):
        gx = g * gd
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        flat_g = g.reshape(-1, c)
        return (dx, (flat_g * xhat.reshape(-1, c)).sum(axis=0), flat_g.sum(axis=0))

    return _finish("layer_norm", xhat * gd + beta.data, (x, gamma, beta), backward)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer labels under row softmax."""
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy: logits must be (batch, classes), got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    b, k = logits.shape
    if labels.shape != (b,):
        raise DimensionError(f"cross_entropy: labels {labels.shape} vs batch {b}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise IndexError(f"cross_entropy: label out of range [0, {k})")
    _check_finite("cross_entropy", logits)
    x = logits.data.astype(np.float64)
    x = x - x.max(axis=1, keepdims=True)
    logz = np.log(np.exp(x).sum(axis=1, keepdims=True))
    logp = x - logz
    loss = -logp[np.arange(b), labels].mean()

    def backward(g):
        grad = np.exp(logp)
        grad[np.arange(b), labels] -= 1.0
        return ((grad * (float(g) / b)).astype(DTYPE),)

    return _finish("cross_entropy", np.array(loss), (logits,), backward)


def custom_grad_node(inputs: Sequence[Tensor], value, backward_rule, kind: str = "custom") -> Tensor:
    """Record ``value`` with a caller-supplied vector-Jacobian product.

    ``backward_rule(upstream)`` receives the gradient w.r.t. the output and
    returns one gradient (or None) per input, each shaped like that input.
    """
    inputs = tuple(inputs)

    def backward(g):
        grads = backward_rule(g)
        if len(grads) != len(inputs):
            raise DimensionError(f"{kind}: backward returned {len(grads)} grads for {len(inputs)} inputs")
        out = []
        for t, gr in zip(inputs, grads):
            if gr is not None:
                gr = np.asarray(gr, dtype=DTYPE)
                if gr.shape != t.shape:
                    raise DimensionError(f"{kind}: gradient {gr.shape} for input {t.shape}")
            out.append(gr)
        return out

    return _finish(kind, value, inputs, backward)
