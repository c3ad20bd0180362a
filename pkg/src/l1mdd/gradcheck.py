"""Finite-difference verification of taped gradients.

The check is deliberately independent of the tape: analytic gradients come
from one recorded forward/backward pass, the numeric side re-evaluates the
loss 2N times with the tape disabled, perturbing one coordinate at a time.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EvaluationError
from .tensor import Tape, Tensor, backward


@dataclass
class FiniteDiffReport:
    max_rel_error: float
    worst_coordinate: tuple[str, tuple[int, ...]]
    per_param: dict[str, float]

    def __str__(self):
        name, idx = self.worst_coordinate
        return f"max rel err {self.max_rel_error:.3e} at {name}{list(idx)}"


def finite_diff_check(fn, params: dict[str, np.ndarray], h: float = 1e-5) -> FiniteDiffReport:
    """Compare taped gradients of `fn(tensors)` to central differences.

    `fn` takes a dict of Tensors keyed like `params` and returns a scalar
    Tensor. Every coordinate of every parameter is perturbed by +-h.
    """
    tensors = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
    with Tape() as tape:
        loss = fn(tensors)
    grads = backward(tape, loss)
    analytic = {k: grads[t.id].data for k, t in tensors.items()}

    def eval_at(values: dict[str, np.ndarray]) -> float:
        out = fn({k: Tensor(v) for k, v in values.items()})
        return float(out.data)

    work = {k: v.copy() for k, v in params.items()}
    worst = 0.0
    worst_coord = ("", ())
    per_param: dict[str, float] = {}
    for name, arr in work.items():
        worst_here = 0.0
        it = np.nditer(arr, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            orig = arr[idx]
            arr[idx] = orig + h
            fp = eval_at(work)
            arr[idx] = orig - h
            fm = eval_at(work)
            arr[idx] = orig
            numeric = (fp - fm) / (2.0 * h)
            a = analytic[name][idx]
            if not (np.isfinite(numeric) and np.isfinite(a)):
                raise EvaluationError(f"non-finite gradient at {name}{list(idx)}: analytic={a}, numeric={numeric}")
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            if rel > worst_here:
                worst_here = rel
            if rel > worst:
                worst = rel
                worst_coord = (name, idx)
            it.iternext()
        per_param[name] = worst_here
    return FiniteDiffReport(max_rel_error=worst, worst_coordinate=worst_coord, per_param=per_param)
