"""Dense tensors with define-by-run reverse-mode differentiation.

Every primitive in this module takes and returns :class:`Tensor` objects.
When a :class:`GradTape` is active and at least one input requires a
gradient, the primitive appends a node to the tape holding its inputs and a
closure mapping the output gradient to input gradients.  :func:`backward`
replays the tape in reverse execution order.

    with GradTape() as tape:
        loss = tensor.sum(tensor.gelu(x))
    grads = tensor.backward(tape, loss)
    grads[x]

The tape is stored in a context variable, so it is confined to the thread
(or task) that opened it.  Randomness is never ambient: :func:`dropout`
takes an explicit ``numpy.random.Generator``.
"""

from __future__ import annotations

import contextvars
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import special

from .errors import ContractError, ParameterError, ShapeError

DEFAULT_DTYPE = np.float64

_active_tape: contextvars.ContextVar[GradTape | None] = contextvars.ContextVar(
    "mixrec_active_tape", default=None
)


class Tensor:
    """A numpy array plus a gradient flag.

    The array is owned by the tensor; primitives never modify their inputs.
    ``grad`` is filled by :func:`backward` for leaf tensors only.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
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

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

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
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor division is only defined by a constant")
        return scale(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a: int, b: int):
        return swapaxes(self, a, b)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)


class GradTape:
    """Ordered record of primitives executed while the tape is active."""

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._token = None

    def __enter__(self) -> GradTape:
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc):
        _active_tape.reset(self._token)
        self._token = None
        return False

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward_fn: Callable) -> None:
        self.nodes.append((out, inputs, backward_fn))


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else DEFAULT_DTYPE))


def _wrap(data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn: Callable) -> Tensor:
    out = Tensor(data)
    tape = _active_tape.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, inputs, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _wrap(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _wrap(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _wrap(ad * bd, (a, b), bw)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _wrap(-a.data, (a,), lambda g: (-g,))


def scale(a, factor: float) -> Tensor:
    a = as_tensor(a)
    return _wrap(a.data * factor, (a,), lambda g: (g * factor,))


# ---------------------------------------------------------------------------
# linear algebra and shape manipulation


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, broadcasting leading axes.

    Both operands must be at least 2-D.  The backward pass yields
    ``dA = dC @ B^T`` and ``dB = A^T @ dC`` reduced over broadcast axes.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}") from exc
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape) if b.requires_grad else None
        return ga, gb

    return _wrap(out, (a, b), bw)


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(int(x) % a.ndim for x in axes)
    inverse = tuple(np.argsort(axes))
    return _wrap(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def swapaxes(a, i: int, j: int) -> Tensor:
    a = as_tensor(a)
    return _wrap(np.swapaxes(a.data, i, j), (a,), lambda g: (np.swapaxes(g, i, j),))


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    original = a.shape
    return _wrap(a.data.reshape(shape), (a,), lambda g: (g.reshape(original),))


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(a, index) -> Tensor:
    """Indexing and slicing; advanced (array) indices scatter-add on backward."""
    a = as_tensor(a)
    shape = a.shape
    basic = _is_basic_index(index)

    def bw(g):
        out = np.zeros(shape, dtype=g.dtype)
        if basic:
            out[index] = g
        else:
            np.add.at(out, index, g)
        return (out,)

    return _wrap(a.data[index], (a,), bw)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in ts]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _wrap(np.concatenate([t.data for t in ts], axis=axis), ts, bw)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    n = len(ts)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return _wrap(np.stack([t.data for t in ts], axis=axis), ts, bw)


# ---------------------------------------------------------------------------
# reductions


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _wrap(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), bw)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = math.prod(a.shape[i] for i in axes)
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / max(count, 1))


def mean_pool(x, valid) -> Tensor:
    """Mean over the first ``valid`` rows of the second-to-last axis.

    ``x`` has shape ``(..., n, C)`` and ``valid`` broadcasts to ``(...)``.
    Rows at or beyond ``valid`` are ignored; ``valid == 0`` yields zeros.
    """
    x = as_tensor(x)
    if x.ndim < 2:
        raise ShapeError(f"mean_pool expects (..., n, C), got {x.shape}")
    n = x.shape[-2]
    valid = np.broadcast_to(np.asarray(valid, dtype=np.int64), x.shape[:-2])
    if valid.size and (valid.min() < 0 or valid.max() > n):
        raise ParameterError(f"valid counts must lie in [0, {n}]")
    keep = (np.arange(n) < valid[..., None]).astype(x.dtype)[..., None]
    denom = np.maximum(valid, 1).astype(x.dtype)[..., None]
    out = (x.data * keep).sum(axis=-2) / denom

    def bw(g):
        return ((g / denom)[..., None, :] * keep,)

    return _wrap(out, (x,), bw)


# ---------------------------------------------------------------------------
# neural-network primitives


def layer_norm(x, gain, bias, eps: float = 1e-12) -> Tensor:
    """Normalize over the last axis with population variance, then scale and shift.

    ``gain`` and ``bias`` must broadcast against ``x``; their last axis equals
    ``x.shape[-1]``.
    """
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if eps < 0:
        raise ParameterError("eps must be non-negative")
    c = x.shape[-1]
    if gain.shape[-1] != c or bias.shape[-1] != c:
        raise ShapeError(f"layer_norm affine shapes {gain.shape}, {bias.shape} do not match {x.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gd = gain.data
    out = xhat * gd + bias.data

    def bw(g):
        gx = None
        if x.requires_grad:
            dxhat = g * gd
            gx = rstd * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        ggain = _unbroadcast(g * xhat, gd.shape) if gain.requires_grad else None
        gbias = _unbroadcast(g, bias.shape) if bias.requires_grad else None
        return gx, ggain, gbias

    return _wrap(out, (x, gain, bias), bw)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x) -> Tensor:
    """``x * Phi(x)`` with the exact (erf-based) standard-normal CDF."""
    x = as_tensor(x)
    xd = x.data
    cdf = 0.5 * (1.0 + special.erf(xd * _INV_SQRT2))
    out = xd * cdf

    def bw(g):
        pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT2PI
        return (g * (cdf + xd * pdf),)

    return _wrap(out, (x,), bw)


def dropout(x, p: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; an exact identity when not training or ``p == 0``."""
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"dropout probability must be in [0, 1), got {p}")
    x = as_tensor(x)
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ParameterError("dropout in training mode needs an explicit rng")
    mask = (rng.random(x.shape) >= p).astype(x.dtype) * (1.0 / (1.0 - p))
    return _wrap(x.data * mask, (x,), lambda g: (g * mask,))


def embedding_lookup(table, indices, padding_idx: int | None = None) -> Tensor:
    """Gather rows of a ``V x C`` table; backward scatter-adds into the rows.

    With ``padding_idx`` set, that index reads as a zero vector whatever the
    table holds and its row receives no gradient.
    """
    table = as_tensor(table)
    idx = np.asarray(indices, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"embedding table must be 2-D, got {table.shape}")
    v, c = table.shape
    if idx.size:
        lo, hi = int(idx.min()), int(idx.max())
        if lo < 0 or hi >= v:
            bad = lo if lo < 0 else hi
            raise IndexError(f"embedding index {bad} out of range [0, {v})")
    out = table.data[idx] if idx.size else np.zeros(idx.shape + (c,), dtype=table.dtype)
    pad = None
    if padding_idx is not None and idx.size:
        pad = idx == padding_idx
        out[pad] = 0.0

    def bw(g):
        gt = np.zeros((v, c), dtype=g.dtype)
        if idx.size:
            rows, gr = idx.reshape(-1), g.reshape(-1, c)
            if pad is not None:
                keep = ~pad.reshape(-1)
                rows, gr = rows[keep], gr[keep]
            np.add.at(gt, rows, gr)
        return (gt,)

    return _wrap(out, (table,), bw)


def softplus(x) -> Tensor:
    """``log(1 + exp(x))`` evaluated without overflow."""
    x = as_tensor(x)
    xd = x.data
    out = np.logaddexp(0.0, xd)

    def bw(g):
        return (g * special.expit(xd),)

    return _wrap(out, (x,), bw)


def log_sigmoid(x) -> Tensor:
    return neg(softplus(neg(x)))


# ---------------------------------------------------------------------------
# differentiation


def backward(tape: GradTape, loss: Tensor, grad: np.ndarray | None = None) -> dict[Tensor, np.ndarray]:
    """Gradients of a scalar ``loss`` with respect to every leaf that requires one.

    Nodes are visited in exact reverse execution order and gradients are
    accumulated additively when a tensor feeds several consumers.  The
    returned mapping is keyed by tensor identity; leaf ``.grad`` fields are
    set as a convenience.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    produced = {id(out) for out, _, _ in tape.nodes}
    if id(loss) not in produced:
        raise ContractError("loss was not produced on this tape")
    seed = np.ones_like(loss.data) if grad is None else np.asarray(grad, dtype=loss.dtype)
    pending: dict[int, np.ndarray] = {id(loss): seed}
    leaves: dict[int, Tensor] = {}
    for out, inputs, fn in reversed(tape.nodes):
        g = pending.pop(id(out), None)
        if g is None:
            continue
        in_grads = fn(g)
        for inp, gi in zip(inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key not in produced:
                leaves[key] = inp
            if key in pending:
                pending[key] = pending[key] + gi
            else:
                pending[key] = gi
    result: dict[Tensor, np.ndarray] = {}
    for key, leaf in leaves.items():
        g = pending[key]
        leaf.grad = g
        result[leaf] = g
    return result


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Iterable[Tensor],
    h: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
    per_param: bool = False,
):
    """Compare analytic gradients of ``f`` against central differences.

    ``f`` rebuilds a scalar tensor from the current values of ``params``.
    Each coordinate is perturbed in place by ``+-h``; at most ``max_coords``
    coordinates per tensor are sampled.  The error for one tensor is the
    norm-wise relative error ``|g_a - g_n| / max(|g_a|, |g_n|, 1e-12)``.
    Returns the maximum over tensors, or a list of per-tensor errors when
    ``per_param`` is set.
    """
    params = list(params)
    with GradTape() as tape:
        loss = f()
    grads = backward(tape, loss)
    rng = rng if rng is not None else np.random.default_rng(0)
    errors = []
    for p in params:
        analytic = grads.get(p, np.zeros_like(p.data))
        if not p.data.flags.c_contiguous:
            p.data = np.ascontiguousarray(p.data)
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        numeric = np.empty(coords.size)
        for n, i in enumerate(coords):
            orig = flat[i]
            flat[i] = orig + h
            up = f().item()
            flat[i] = orig - h
            down = f().item()
            flat[i] = orig
            numeric[n] = (up - down) / (2.0 * h)
        a = analytic.reshape(-1)[coords]
        denom = max(np.linalg.norm(a), np.linalg.norm(numeric), 1e-12)
        errors.append(float(np.linalg.norm(a - numeric) / denom))
    if per_param:
        return errors
    return max(errors) if errors else 0.0
