"""CTC loss in log space, a brute-force path-sum oracle, and greedy decoding.

The forward recursion runs over the extended target (blanks interleaved,
length 2l+1) and is built entirely from taped primitives, so gradients come
from the tape; no hand-written backward recursion. Impossible alignments
carry the finite sentinel LOG_ZERO instead of -inf: exp(LOG_ZERO) underflows
to exactly 0, which keeps every logsumexp gradient finite.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, InputError
from .tensor import Tensor

LOG_ZERO = -1e30
ORACLE_PATH_CAP = 1_000_000


@dataclass(frozen=True)
class CtcTarget:
    labels: tuple[int, ...]
    blank_id: int

    def __post_init__(self):
        for lab in self.labels:
            if lab == self.blank_id:
                raise InputError(f"target label equals blank id {self.blank_id}")
            if lab < 0:
                raise InputError(f"negative label {lab}")

    @property
    def min_frames(self) -> int:
        """Shortest feasible alignment: every label plus a separating blank per repeat."""
        repeats = sum(1 for a, b in zip(self.labels, self.labels[1:]) if a == b)
        return len(self.labels) + repeats


def extended_target(target: CtcTarget) -> list[int]:
    ext = [target.blank_id]
    for lab in target.labels:
        ext += [lab, target.blank_id]
    return ext


@dataclass
class CtcLoss:
    loss: Tensor | None  # None when infeasible
    feasible: bool

    def value(self) -> float:
        return math.inf if not self.feasible else float(self.loss.data)


def _check_log_prob_rows(log_probs: Tensor) -> None:
    row_lse = np.logaddexp.reduce(log_probs.data, axis=-1)
    if np.abs(row_lse).max(initial=0.0) > 1e-6:
        raise InputError("log_probs rows must be log-softmax outputs (each row must sum to 1 in probability)")


def ctc_loss(log_probs: Tensor, target: CtcTarget) -> CtcLoss:
    """Single utterance: log_probs T x C, rows already log-normalized."""
    if log_probs.ndim != 2:
        raise InputError(f"log_probs must be T x C, got shape {log_probs.shape}")
    t_max, n_classes = log_probs.shape
    if target.blank_id >= n_classes or any(lab >= n_classes for lab in target.labels):
        raise InputError(f"labels exceed class count {n_classes}")
    _check_log_prob_rows(log_probs)
    if target.min_frames > t_max:
        return CtcLoss(loss=None, feasible=False)

    ext = extended_target(target)
    s = len(ext)
    ext_idx = np.asarray(ext, dtype=np.intp)
    # emissions for the extended target at every frame, gathered once: T x S
    emit = T.take_along(log_probs, np.broadcast_to(ext_idx, (t_max, s)).copy())

    neg = Tensor(np.full((1,), LOG_ZERO))
    if s == 1:
        alpha = emit[0:1, 0]
    else:
        alpha = T.concat([emit[0:1, 0], emit[0:1, 1]] + [neg] * (s - 2), axis=0)
    for t_i in range(1, t_max):
        stay = alpha
        prev1 = T.concat([neg, alpha[: s - 1]], axis=0)
        terms = [stay, prev1]
        if s > 2:
            # the skip transition is blocked into blanks and into a repeated label
            skip_ok = np.full(s, LOG_ZERO)
            for j in range(2, s):
                if ext[j] != target.blank_id and ext[j] != ext[j - 2]:
                    skip_ok[j] = 0.0
            prev2 = T.add(T.concat([neg, neg, alpha[: s - 2]], axis=0), Tensor(skip_ok))
            terms.append(prev2)
        stacked = T.concat([T.reshape(x, (1, s)) for x in terms], axis=0)
        alpha = T.add(T.logsumexp(stacked, axis=0), emit[t_i])
    if s == 1:
        total = alpha[0]
    else:
        total = T.logsumexp(T.concat([alpha[s - 2 : s - 1], alpha[s - 1 : s]], axis=0), axis=0)
    return CtcLoss(loss=T.scale(T.reshape(total, ()), -1.0), feasible=True)


@dataclass
class BatchCtcLoss:
    mean_loss: Tensor | None  # mean over feasible items; None if none feasible
    per_item: list[CtcLoss]
    infeasible_count: int


def ctc_loss_batch(log_probs: Tensor, lengths: np.ndarray, targets: list[CtcTarget]) -> BatchCtcLoss:
    """Vectorized over the batch: log_probs B x T x C with per-item lengths.

    Infeasible items are excluded from the mean and counted, not raised.
    Equivalent to per-utterance ctc_loss on each unpadded slice.
    """
    bsz, t_max, n_classes = log_probs.shape
    if len(targets) != bsz or len(lengths) != bsz:
        raise InputError(f"batch size mismatch: {bsz} rows, {len(targets)} targets, {len(lengths)} lengths")
    if len({t.blank_id for t in targets}) != 1:
        raise InputError("all targets in a batch must share one blank id")
    _check_log_prob_rows(log_probs)
    feasible = np.array([t.min_frames <= lengths[b] for b, t in enumerate(targets)])
    per_item_flags = [CtcLoss(loss=None, feasible=bool(f)) for f in feasible]
    if not feasible.any():
        return BatchCtcLoss(mean_loss=None, per_item=per_item_flags, infeasible_count=bsz)

    blank = targets[0].blank_id
    exts = [extended_target(t) for t in targets]
    s_max = max(len(e) for e in exts)
    s_len = np.array([len(e) for e in exts])
    ext_pad = np.full((bsz, s_max), blank, dtype=np.intp)
    skip_ok = np.full((bsz, s_max), LOG_ZERO)
    state_pad = np.full((bsz, s_max), 0.0)
    for b, e in enumerate(exts):
        ext_pad[b, : len(e)] = e
        for j in range(2, len(e)):
            if e[j] != blank and e[j] != e[j - 2]:
                skip_ok[b, j] = 0.0
        state_pad[b, len(e) :] = LOG_ZERO  # padded states never hold mass

    # gather emissions for every extended state at every frame: B x T x S
    emit = T.take_along(log_probs, np.broadcast_to(ext_pad[:, None, :], (bsz, t_max, s_max)).copy())

    neg_col = Tensor(np.full((bsz, 1), LOG_ZERO))
    pad_mask = Tensor(state_pad)
    init_parts = [emit[:, 0, 0:1]]
    if s_max > 1:
        init_parts.append(emit[:, 0, 1:2])
    if s_max > 2:
        init_parts.append(T.expand(neg_col, (bsz, s_max - 2)))
    alpha = init_parts[0] if len(init_parts) == 1 else T.concat(init_parts, axis=1)
    alpha = T.add(alpha, pad_mask)
    skip_mask = Tensor(skip_ok)
    # frames at or beyond an item's true length freeze its recursion
    time_live = (np.arange(t_max)[None, :] < lengths[:, None]).astype(np.float64)
    for t_i in range(1, t_max):
        stay = alpha
        prev1 = T.concat([neg_col, alpha[:, : s_max - 1]], axis=1)
        terms = [stay, prev1]
        if s_max > 2:
            prev2 = T.add(T.concat([neg_col, neg_col, alpha[:, : s_max - 2]], axis=1), skip_mask)
            terms.append(prev2)
        stacked = T.concat([T.reshape(x, (1, bsz, s_max)) for x in terms], axis=0)
        candidate = T.add(T.logsumexp(stacked, axis=0), emit[:, t_i])
        live = Tensor(time_live[:, t_i : t_i + 1])
        frozen = Tensor(1.0 - time_live[:, t_i : t_i + 1])
        alpha = T.add(T.mul(live, candidate), T.mul(frozen, alpha))

    # total per item: logsumexp of the last two live states (just the single
    # state when the target is empty)
    last = np.stack([s_len - 1, np.maximum(s_len - 2, 0)], axis=1)
    finals = T.take_along(alpha, last)  # B x 2
    singles = s_len == 1
    if singles.any():
        dedup = np.where(singles[:, None] * np.array([[False, True]]), LOG_ZERO, 0.0)
        finals = T.add(finals, Tensor(dedup))
    total = T.logsumexp(finals, axis=-1)  # B
    feas_w = feasible.astype(np.float64)
    mean = T.scale(T.sum_(T.mul(total, Tensor(feas_w))), -1.0 / feasible.sum())
    return BatchCtcLoss(mean_loss=mean, per_item=per_item_flags, infeasible_count=int(bsz - feasible.sum()))


def _collapse(path: tuple[int, ...], blank: int) -> tuple[int, ...]:
    out = []
    prev = None
    for p in path:
        if p != prev:
            if p != blank:
                out.append(p)
        prev = p
    return tuple(out)


def ctc_brute_force_oracle(probs: np.ndarray, target: CtcTarget) -> float:
    """Enumerate every frame-label path; -log of the mass collapsing to target."""
    probs = np.asarray(probs, dtype=np.float64)
    t_max, n_classes = probs.shape
    if n_classes**t_max > ORACLE_PATH_CAP:
        raise ContractError(f"{n_classes}^{t_max} paths exceed the oracle cap {ORACLE_PATH_CAP}")
    want = tuple(target.labels)
    total = 0.0
    for path in itertools.product(range(n_classes), repeat=t_max):
        if _collapse(path, target.blank_id) == want:
            p = 1.0
            for t_i, c in enumerate(path):
                p *= probs[t_i, c]
            total += p
    return -math.log(total) if total > 0 else math.inf


def greedy_decode(log_probs: Tensor | np.ndarray, blank_id: int) -> list[int]:
    """Best-path decode: per-frame argmax, collapse repeats, drop blanks.

    numpy argmax already breaks ties by lowest index.
    """
    arr = log_probs.data if isinstance(log_probs, Tensor) else np.asarray(log_probs)
    frames = arr.argmax(axis=-1)
    return list(_collapse(tuple(int(f) for f in frames), blank_id))
