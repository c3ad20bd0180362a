"""Dense float64 tensors with taped reverse-mode automatic differentiation.

Values are plain numpy arrays in row-major order. A Tape records every
primitive application whose inputs require gradients; `backward` replays the
records once, in reverse, accumulating gradients into the leaves. Tensors are
value-semantic: slice and concat boundaries copy rather than alias, which
keeps every backward rule a pure function of the recorded operands.

A Tape is meant to live for one training step on one thread. Forward passes
without an active tape record nothing and are safe to run concurrently on
shared, immutable parameters.
"""

from __future__ import annotations

import itertools

import numpy as np

from .errors import ContractError, DimensionError

_ids = itertools.count()
_ACTIVE_TAPE: "Tape | None" = None


class Tensor:
    __slots__ = ("data", "requires_grad", "id")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.id = next(_ids)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, as_tensor(other))

    def __sub__(self, other):
        return sub(self, as_tensor(other))

    def __mul__(self, other):
        return mul(self, as_tensor(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))

    def __getitem__(self, key):
        return slice_(self, key)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class TapeEntry:
    __slots__ = ("output_id", "input_ids", "backward_fn")

    def __init__(self, output_id, input_ids, backward_fn):
        self.output_id = output_id
        self.input_ids = input_ids
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of primitive applications; topological by construction."""

    def __init__(self):
        self.entries: list[TapeEntry] = []
        self._produced: set[int] = set()
        self._leaves: dict[int, Tensor] = {}

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise ContractError("a tape is already active on this thread")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def record(self, inputs, output: Tensor, backward_fn) -> None:
        for t in inputs:
            if t.requires_grad and t.id not in self._produced and t.id not in self._leaves:
                self._leaves[t.id] = t
        self._produced.add(output.id)
        self.entries.append(TapeEntry(output.id, tuple(t.id for t in inputs), backward_fn))

    @property
    def leaves(self) -> dict[int, Tensor]:
        return dict(self._leaves)

    def __len__(self):
        return len(self.entries)


def active_tape() -> "Tape | None":
    return _ACTIVE_TAPE


def _apply(inputs, out_data, backward_fn) -> Tensor:
    out = Tensor(out_data)
    tape = _ACTIVE_TAPE
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(inputs, out, backward_fn)
    return out


def backward(tape: Tape, loss: Tensor) -> dict[int, Tensor]:
    """Gradients of a scalar loss w.r.t. every requires-grad leaf on the tape.

    Leaves not reachable from the loss get a zero gradient of their shape.
    Each recorded node is visited exactly once.
    """
    if loss.data.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.data.shape}")
    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    for entry in reversed(tape.entries):
        g = grads.pop(entry.output_id, None)
        if g is None:
            continue
        contribs = entry.backward_fn(g)
        for iid, gin in zip(entry.input_ids, contribs):
            if gin is None:
                continue
            prev = grads.get(iid)
            grads[iid] = gin if prev is None else prev + gin
    out: dict[int, Tensor] = {}
    for lid, leaf in tape._leaves.items():
        g = grads.get(lid)
        out[lid] = Tensor(g if g is not None else np.zeros_like(leaf.data))
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    def bw(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _apply((a, b), a.data + b.data, bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    def bw(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _apply((a, b), a.data - b.data, bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _apply((a, b), ad * bd, bw)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def bw(g):
        return (g * s,)

    return _apply((a,), a.data * s, bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise DimensionError(f"matmul requires >=2-d operands, got {ad.shape} and {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {ad.shape} vs {bd.shape}")

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ bd.swapaxes(-1, -2), ad.shape)
        if b.requires_grad:
            gb = _unbroadcast(ad.swapaxes(-1, -2) @ g, bd.shape)
        return ga, gb

    return _apply((a, b), ad @ bd, bw)


def powc(a: Tensor, p: float) -> Tensor:
    p = float(p)
    ad = a.data

    def bw(g):
        return (g * p * ad ** (p - 1.0),)

    return _apply((a,), ad**p, bw)


# ---------------------------------------------------------------------------
# shape


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {a.data.shape}")

    def bw(g):
        return (g.T.copy(),)

    return _apply((a,), a.data.T.copy(), bw)


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    def bw(g):
        return (g.swapaxes(i, j).copy(),)

    return _apply((a,), a.data.swapaxes(i, j).copy(), bw)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape

    def bw(g):
        return (g.reshape(old),)

    return _apply((a,), a.data.reshape(shape).copy(), bw)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise DimensionError("concat of zero tensors")
    datas = [t.data for t in tensors]
    sizes = [d.shape[axis] for d in datas]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(p.copy() for p in np.split(g, splits, axis=axis))

    return _apply(tuple(tensors), np.concatenate(datas, axis=axis), bw)


def slice_(a: Tensor, key) -> Tensor:
    """Basic indexing only (ints / slices); output is a copy."""
    shape = a.data.shape

    def bw(g):
        z = np.zeros(shape)
        z[key] = g
        return (z,)

    out = a.data[key]
    return _apply((a,), np.array(out, dtype=np.float64), bw)


def expand(a: Tensor, shape) -> Tensor:
    old = a.data.shape

    def bw(g):
        return (_unbroadcast(g, old),)

    return _apply((a,), np.broadcast_to(a.data, shape).copy(), bw)


def take(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather along one axis (embedding lookup is take(weights, ids, axis=0))."""
    idx = np.asarray(indices, dtype=np.intp)
    ad = a.data
    axis = axis % ad.ndim

    def bw(g):
        if not a.requires_grad:
            return (None,)
        z = np.zeros(ad.shape)
        gr = g.reshape(ad.shape[:axis] + (idx.size,) + ad.shape[axis + 1 :])
        np.add.at(np.moveaxis(z, axis, 0), idx.ravel(), np.moveaxis(gr, axis, 0))
        return (z,)

    return _apply((a,), np.take(ad, idx, axis=axis), bw)


def take_along(a: Tensor, indices) -> Tensor:
    """Gather along the last axis with per-row indices."""
    idx = np.asarray(indices, dtype=np.intp)
    ad = a.data
    if idx.shape[:-1] != ad.shape[:-1]:
        raise DimensionError(f"take_along leading dims differ: {ad.shape} vs {idx.shape}")

    def bw(g):
        if not a.requires_grad:
            return (None,)
        z = np.zeros(ad.shape)
        zf = z.reshape(-1, ad.shape[-1])
        gf = g.reshape(-1, idx.shape[-1])
        rows = np.repeat(np.arange(zf.shape[0]), idx.shape[-1])
        np.add.at(zf, (rows, idx.reshape(-1)), gf.reshape(-1))
        return (z,)

    return _apply((a,), np.take_along_axis(ad, idx, axis=-1), bw)


# ---------------------------------------------------------------------------
# nonlinearities


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def bw(g):
        return (g * mask,)

    return _apply((a,), np.where(mask, a.data, 0.0), bw)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def bw(g):
        return (g * (1.0 - out * out),)

    return _apply((a,), out, bw)


def sigmoid(a: Tensor) -> Tensor:
    # evaluated branch-wise so large |x| cannot overflow exp
    x = a.data
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def bw(g):
        return (g * out * (1.0 - out),)

    return _apply((a,), out, bw)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def bw(g):
        return (g * out,)

    return _apply((a,), out, bw)


def log(a: Tensor) -> Tensor:
    # pre: strictly positive entries
    ad = a.data

    def bw(g):
        return (g / ad,)

    return _apply((a,), np.log(ad), bw)


# ---------------------------------------------------------------------------
# reductions and normalizers


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return ((g - (g * out).sum(axis=axis, keepdims=True)) * out,)

    return _apply((a,), out, bw)


def softmax_rows(a: Tensor) -> Tensor:
    """Row-stable softmax: per-row max subtraction, rows sum to one."""
    return softmax(a, axis=-1)


def logsumexp(a: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    out_k = np.log(np.exp(x - m).sum(axis=axis, keepdims=True)) + m
    out = out_k if keepdims else np.squeeze(out_k, axis=axis)

    def bw(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        return (gk * np.exp(x - out_k),)

    return _apply((a,), out, bw)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.data.shape

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        gk = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gk, shape).copy(),)

    return _apply((a,), a.data.sum(axis=axis, keepdims=keepdims), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.data.shape
    if axis is None:
        n = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = 1
        for ax in axes:
            n *= shape[ax]

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g / n, shape).copy(),)
        gk = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gk / n, shape).copy(),)

    return _apply((a,), a.data.mean(axis=axis, keepdims=keepdims), bw)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    return sub(a, logsumexp(a, axis=axis, keepdims=True))


# ---------------------------------------------------------------------------
# losses


def cross_entropy(logits: Tensor, label: int) -> Tensor:
    """-log softmax(logits)[label] for a single logit vector."""
    if logits.data.ndim != 1:
        raise DimensionError(f"cross_entropy expects a vector, got shape {logits.data.shape}")
    c = logits.data.shape[0]
    if not 0 <= label < c:
        raise IndexError(f"label {label} out of range for {c} classes")
    lse = logsumexp(logits, axis=-1)
    picked = reshape(slice_(logits, slice(label, label + 1)), ())
    return sub(lse, picked)


def cross_entropy_rows(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy over a batch of logit rows."""
    labels = np.asarray(labels, dtype=np.intp)
    c = logits.data.shape[-1]
    if labels.min(initial=0) < 0 or labels.max(initial=-1) >= c:
        raise IndexError(f"labels out of range for {c} classes")
    lse = logsumexp(logits, axis=-1)
    picked = reshape(take_along(logits, labels[:, None]), lse.data.shape)
    return mean(sub(lse, picked))
