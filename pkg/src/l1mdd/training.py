"""Training loops and experiment plumbing.

Three learning setups share one engine:
  - auxiliary pretraining: weighted L1/L2 cross-entropy over the pooled
    acoustic embedding, early-stopped on mean class accuracy;
  - sequential recognizer training: the auxiliary net is frozen and only
    supplies its embedding, the objective is the recognition loss alone;
  - joint training: both networks update under
    total = alpha * loss_pr + (1 - alpha) * (loss_l1 + loss_l2).

Checkpoints are a JSON header plus named little-endian float64 blocks and
round-trip bitwise. All shuffling derives from TrainConfig.seed through
named streams, so runs with equal seeds produce identical trajectories and
every ablation variant sees the same batch order.
"""

from __future__ import annotations

import dataclasses
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import rng as rngmod
from . import tensor as T
from .corpus import Batch, UtteranceRecord, make_batches
from .ctc import CtcTarget, ctc_loss_batch, greedy_decode
from .errors import ConfigError, InputError
from .evaluate import EvalItem, MetricsReport, evaluate_dataset
from .inventory import PhonemeInventory, decode as decode_ids
from .networks import (
    AuxConfig,
    ConvSpec,
    ModelConfig,
    aux_forward_batch,
    init_aux_params,
    init_mdd_params,
    mdd_forward_batch,
    wrap_params,
)
from .optim import AdamState, adam_step
from .tensor import Tape, Tensor, backward

CHECKPOINT_MAGIC = b"L1CK"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 32
    max_epochs: int = 100
    patience: int = 10
    alpha: float = 0.8
    aux_weights: tuple[float, float] = (0.5, 0.5)
    freeze_conv: bool = True
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 < self.alpha <= 1.0:
            raise ConfigError(f"alpha must be in (0, 1], got {self.alpha}")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 1:
            raise ConfigError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if len(self.aux_weights) != 2 or any(w < 0 for w in self.aux_weights):
            raise ConfigError(f"aux_weights must be two nonnegative numbers, got {self.aux_weights}")


@dataclass(frozen=True)
class LossBreakdown:
    loss_pr: float
    loss_l1: float
    loss_l2: float
    total: float


# ---------------------------------------------------------------------------
# config snapshots

def train_config_to_dict(tcfg: TrainConfig) -> dict:
    d = dataclasses.asdict(tcfg)
    d["aux_weights"] = list(tcfg.aux_weights)
    return d


def train_config_from_dict(d: dict) -> TrainConfig:
    kw = dict(d)
    kw["aux_weights"] = tuple(kw["aux_weights"])
    return TrainConfig(**kw)


def model_config_to_dict(cfg: ModelConfig) -> dict:
    d = dataclasses.asdict(cfg)
    d["conv"] = [[c.channels, c.kernel, c.stride] for c in cfg.conv]
    d["l1_classes"] = list(cfg.l1_classes)
    d["l2_classes"] = list(cfg.l2_classes)
    return d


def model_config_from_dict(d: dict) -> ModelConfig:
    kw = dict(d)
    kw["conv"] = tuple(ConvSpec(*c) for c in kw["conv"])
    kw["l1_classes"] = tuple(kw["l1_classes"])
    kw["l2_classes"] = tuple(kw["l2_classes"])
    return ModelConfig(**kw)


def aux_config_to_dict(acfg: AuxConfig) -> dict:
    d = dataclasses.asdict(acfg)
    d["conv"] = [[c.channels, c.kernel, c.stride] for c in acfg.conv]
    d["l1_classes"] = list(acfg.l1_classes)
    d["l2_classes"] = list(acfg.l2_classes)
    return d


def aux_config_from_dict(d: dict) -> AuxConfig:
    kw = dict(d)
    kw["conv"] = tuple(ConvSpec(*c) for c in kw["conv"])
    kw["l1_classes"] = tuple(kw["l1_classes"])
    kw["l2_classes"] = tuple(kw["l2_classes"])
    return AuxConfig(**kw)


# ---------------------------------------------------------------------------
# checkpoints

@dataclass
class Checkpoint:
    kind: str  # "mdd" or "aux"
    model: dict  # config snapshot of the owning network
    aux_model: dict | None
    train: dict
    params: dict[str, np.ndarray]
    opt: AdamState | None
    epoch: int
    best_metric: float

    def model_config(self) -> ModelConfig:
        return model_config_from_dict(self.model)

    def aux_config(self) -> AuxConfig | None:
        return None if self.aux_model is None else aux_config_from_dict(self.aux_model)


def save_checkpoint(ck: Checkpoint, path: str | Path) -> None:
    """Atomic write: header JSON, then each array as little-endian float64."""
    names = sorted(ck.params)
    header = {
        "kind": ck.kind,
        "model": ck.model,
        "aux_model": ck.aux_model,
        "train": ck.train,
        "epoch": ck.epoch,
        "best_metric": ck.best_metric,
        "arrays": [{"name": n, "shape": list(ck.params[n].shape)} for n in names],
        "adam": None,
    }
    blocks = [ck.params[n] for n in names]
    if ck.opt is not None:
        opt_names = sorted(ck.opt.m)
        header["adam"] = {
            "lr": ck.opt.lr,
            "beta1": ck.opt.beta1,
            "beta2": ck.opt.beta2,
            "eps": ck.opt.eps,
            "t": ck.opt.t,
            "names": opt_names,
        }
        blocks += [ck.opt.m[n] for n in opt_names]
        blocks += [ck.opt.v[n] for n in opt_names]
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(CHECKPOINT_MAGIC)
            f.write(struct.pack("<II", CHECKPOINT_VERSION, len(head)))
            f.write(head)
            for arr in blocks:
                f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise InputError(f"{path}: not a checkpoint file")
    version, head_len = struct.unpack("<II", raw[4:12])
    if version != CHECKPOINT_VERSION:
        raise InputError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[12 : 12 + head_len].decode("utf-8"))
    offset = 12 + head_len

    def read_block(shape) -> np.ndarray:
        nonlocal offset
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        end = offset + 8 * n
        if end > len(raw):
            raise InputError(f"{path}: truncated checkpoint")
        arr = np.frombuffer(raw[offset:end], dtype="<f8").reshape(shape).copy()
        offset = end
        return arr

    params = {spec["name"]: read_block(spec["shape"]) for spec in header["arrays"]}
    opt = None
    if header["adam"] is not None:
        a = header["adam"]
        opt = AdamState(lr=a["lr"], beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"], t=a["t"])
        shapes = {spec["name"]: spec["shape"] for spec in header["arrays"]}
        opt.m = {n: read_block(shapes[n]) for n in a["names"]}
        opt.v = {n: read_block(shapes[n]) for n in a["names"]}
    if offset != len(raw):
        raise InputError(f"{path}: {len(raw) - offset} trailing bytes")
    return Checkpoint(
        kind=header["kind"],
        model=header["model"],
        aux_model=header["aux_model"],
        train=header["train"],
        params=params,
        opt=opt,
        epoch=header["epoch"],
        best_metric=header["best_metric"],
    )


# ---------------------------------------------------------------------------
# shared loop machinery

@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log_rows: list[dict]
    step_breakdowns: list[LossBreakdown]
    best_epoch: int
    best_metric: float


def _epoch_seed(seed: int, epoch: int) -> int:
    return int(rngmod.stream(seed, f"train/epoch/{epoch}").integers(0, 2**63))


def _is_conv(name: str) -> bool:
    return any(part.startswith("conv") for part in name.split("."))


def _grads_by_name(P: dict[str, Tensor], grads: dict[int, Tensor]) -> dict[str, np.ndarray]:
    return {name: grads[t.id].data for name, t in P.items() if t.requires_grad}


def _log_row(epoch: int, split: str, bd: LossBreakdown, per=None, frr=None) -> dict:
    return {
        "epoch": epoch,
        "split": split,
        "loss_pr": bd.loss_pr,
        "loss_l1": bd.loss_l1,
        "loss_l2": bd.loss_l2,
        "total": bd.total,
        "per": per,
        "frr": frr,
    }


def _mean_breakdown(bds: list[LossBreakdown]) -> LossBreakdown:
    n = max(len(bds), 1)
    return LossBreakdown(
        loss_pr=sum(b.loss_pr for b in bds) / n,
        loss_l1=sum(b.loss_l1 for b in bds) / n,
        loss_l2=sum(b.loss_l2 for b in bds) / n,
        total=sum(b.total for b in bds) / n,
    )


class _LogWriter:
    def __init__(self, path: str | Path | None):
        self.path = Path(path) if path else None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("", encoding="utf-8")

    def write(self, row: dict) -> None:
        if self.path:
            with open(self.path, "a", encoding="utf-8") as f:
                f.write(json.dumps(row, sort_keys=True) + "\n")


def _indices(classes: tuple[str, ...]) -> dict[str, int]:
    return {c: i for i, c in enumerate(classes)}


def _batch_languages(batch: Batch, l1_classes, l2_classes) -> tuple[list[str], list[str]]:
    return [l1_classes[i] for i in batch.l1_ids], [l2_classes[i] for i in batch.l2_ids]


def _ctc_targets(batch: Batch, blank_id: int) -> list[CtcTarget]:
    out = []
    for i in range(len(batch)):
        n = int(batch.annotated_lengths[i])
        out.append(CtcTarget(tuple(int(x) for x in batch.annotated[i, :n]), blank_id=blank_id))
    return out


# ---------------------------------------------------------------------------
# auxiliary pretraining

def train_aux(
    train_records: list[UtteranceRecord],
    valid_records: list[UtteranceRecord],
    features: dict[str, np.ndarray],
    inv: PhonemeInventory,
    acfg: AuxConfig,
    tcfg: TrainConfig,
    log_path: str | Path | None = None,
) -> TrainResult:
    """Pretrain the L1/L2 classifier; early-stops on mean class accuracy."""
    acfg.validate()
    tcfg.validate()
    l1_index = _indices(acfg.l1_classes)
    l2_index = _indices(acfg.l2_classes)
    params = init_aux_params(acfg, tcfg.seed)
    trainable = {n for n in params if not (tcfg.freeze_conv and _is_conv(n))}
    opt = AdamState.for_params({n: params[n] for n in trainable}, lr=tcfg.learning_rate)
    w1, w2 = tcfg.aux_weights
    log = _LogWriter(log_path)
    valid_batches = make_batches(valid_records, tcfg.batch_size, inv, l1_index, l2_index, features=features)

    rows: list[dict] = []
    steps: list[LossBreakdown] = []
    best_metric = -1.0
    best_params: dict[str, np.ndarray] = {}
    best_epoch = 0
    since_best = 0
    for epoch in range(1, tcfg.max_epochs + 1):
        batches = make_batches(
            train_records, tcfg.batch_size, inv, l1_index, l2_index,
            seed=_epoch_seed(tcfg.seed, epoch), shuffle=True, features=features,
        )
        epoch_bds = []
        for batch in batches:
            P = wrap_params(params, trainable)
            with Tape() as tape:
                out = aux_forward_batch(P, acfg, Tensor(batch.features), batch.frame_lengths)
                l1ce = T.cross_entropy_rows(out.l1_logits, batch.l1_ids)
                l2ce = T.cross_entropy_rows(out.l2_logits, batch.l2_ids)
                obj = T.add(T.scale(l1ce, w1), T.scale(l2ce, w2))
            grads = backward(tape, obj)
            adam_step(params, _grads_by_name(P, grads), opt)
            bd = LossBreakdown(0.0, float(l1ce.data), float(l2ce.data), float(obj.data))
            epoch_bds.append(bd)
            steps.append(bd)
            row = _log_row(epoch, "step", bd)
            rows.append(row)
            log.write(row)

        acc_l1, acc_l2, val_bd = _aux_validate(params, acfg, valid_batches, tcfg)
        metric = 0.5 * (acc_l1 + acc_l2)
        train_row = _log_row(epoch, "train", _mean_breakdown(epoch_bds))
        valid_row = _log_row(epoch, "valid", val_bd)
        valid_row["acc_l1"] = acc_l1
        valid_row["acc_l2"] = acc_l2
        for row in (train_row, valid_row):
            rows.append(row)
            log.write(row)

        if metric > best_metric:
            best_metric = metric
            best_params = {n: p.copy() for n, p in params.items()}
            best_epoch = epoch
            since_best = 0
        else:
            since_best += 1
        if since_best >= tcfg.patience:
            break

    ck = Checkpoint(
        kind="aux",
        model=aux_config_to_dict(acfg),
        aux_model=None,
        train=train_config_to_dict(tcfg),
        params=best_params,
        opt=opt,
        epoch=best_epoch,
        best_metric=best_metric,
    )
    return TrainResult(ck, rows, steps, best_epoch, best_metric)


def _aux_validate(params, acfg, batches, tcfg) -> tuple[float, float, LossBreakdown]:
    hits1 = hits2 = total = 0
    losses = []
    w1, w2 = tcfg.aux_weights
    for batch in batches:
        P = wrap_params(params, trainable=set())
        out = aux_forward_batch(P, acfg, Tensor(batch.features), batch.frame_lengths)
        l1ce = float(T.cross_entropy_rows(out.l1_logits, batch.l1_ids).data)
        l2ce = float(T.cross_entropy_rows(out.l2_logits, batch.l2_ids).data)
        losses.append(LossBreakdown(0.0, l1ce, l2ce, w1 * l1ce + w2 * l2ce))
        hits1 += int((out.l1_logits.data.argmax(axis=-1) == batch.l1_ids).sum())
        hits2 += int((out.l2_logits.data.argmax(axis=-1) == batch.l2_ids).sum())
        total += len(batch)
    return hits1 / total, hits2 / total, _mean_breakdown(losses)


def aux_accuracy(
    checkpoint: Checkpoint,
    records: list[UtteranceRecord],
    features: dict[str, np.ndarray],
    inv: PhonemeInventory,
    batch_size: int = 32,
) -> tuple[float, float]:
    """(L1 accuracy, L2 accuracy) of a pretrained classifier on a dataset."""
    acfg = aux_config_from_dict(checkpoint.model)
    batches = make_batches(
        records, batch_size, inv, _indices(acfg.l1_classes), _indices(acfg.l2_classes), features=features
    )
    tcfg = train_config_from_dict(checkpoint.train)
    acc1, acc2, _ = _aux_validate(checkpoint.params, acfg, batches, tcfg)
    return acc1, acc2


# ---------------------------------------------------------------------------
# recognizer training

def _mdd_batch_loss(
    P: dict[str, Tensor],
    cfg: ModelConfig,
    acfg: AuxConfig | None,
    batch: Batch,
    tcfg: TrainConfig,
    joint: bool,
):
    """Forward + loss tensors for one batch; returns (total, breakdown)."""
    l1s, l2s = _batch_languages(batch, cfg.l1_classes, cfg.l2_classes)
    out = mdd_forward_batch(
        P, cfg, Tensor(batch.features), batch.frame_lengths,
        canonical=batch.canonical if cfg.phoneme_encoder else None,
        canonical_lengths=batch.canonical_lengths if cfg.phoneme_encoder else None,
        l1=l1s, l2=l2s, acfg=acfg,
    )
    lp = T.log_softmax(out.logits, axis=-1)
    ctc = ctc_loss_batch(lp, out.frame_length, _ctc_targets(batch, cfg.blank_id))
    loss_pr = ctc.mean_loss
    if loss_pr is None:
        return None, None, out
    if joint:
        l1ce = T.cross_entropy_rows(out.aux.l1_logits, batch.l1_ids)
        l2ce = T.cross_entropy_rows(out.aux.l2_logits, batch.l2_ids)
        total = T.add(T.scale(loss_pr, tcfg.alpha), T.scale(T.add(l1ce, l2ce), 1.0 - tcfg.alpha))
        bd = LossBreakdown(float(loss_pr.data), float(l1ce.data), float(l2ce.data), float(total.data))
    else:
        total = loss_pr
        bd = LossBreakdown(float(loss_pr.data), 0.0, 0.0, float(total.data))
    return total, bd, out


def _mdd_validate(params, cfg, acfg, batches, records, inv, tcfg, joint) -> tuple[MetricsReport, LossBreakdown]:
    losses = []
    items = []
    by_id = {rec.utt_id: rec for rec in records}
    for batch in batches:
        P = wrap_params(params, trainable=set())
        total, bd, out = _mdd_batch_loss(P, cfg, acfg, batch, tcfg, joint)
        if bd is not None:
            losses.append(bd)
        lp = T.log_softmax(out.logits, axis=-1).data
        for i, utt_id in enumerate(batch.utt_ids):
            ids = greedy_decode(lp[i, : int(out.frame_length[i])], cfg.blank_id)
            rec = by_id[utt_id]
            items.append(EvalItem(rec.l2, rec.canonical, rec.annotated, decode_ids(ids, inv)))
    return evaluate_dataset(items), _mean_breakdown(losses)


def train_mdd(
    train_records: list[UtteranceRecord],
    valid_records: list[UtteranceRecord],
    features: dict[str, np.ndarray],
    inv: PhonemeInventory,
    cfg: ModelConfig,
    tcfg: TrainConfig,
    acfg: AuxConfig | None = None,
    aux_checkpoint: Checkpoint | None = None,
    joint: bool = False,
    log_path: str | Path | None = None,
) -> TrainResult:
    """Train the recognizer; early-stops on validation PER (best kept).

    With conditioning "aux" the pretrained auxiliary checkpoint is required:
    frozen when `joint` is false, updated alongside the recognizer when true.
    """
    cfg.validate()
    tcfg.validate()
    if cfg.conditioning == "aux":
        if aux_checkpoint is None:
            raise ConfigError("aux conditioning needs a pretrained auxiliary checkpoint")
        if acfg is None:
            acfg = aux_config_from_dict(aux_checkpoint.model)
        if cfg.d_eps != acfg.d_eps:
            raise ConfigError(f"model expects d_eps={cfg.d_eps}, auxiliary provides {acfg.d_eps}")
    elif joint:
        raise ConfigError("joint training only makes sense with conditioning 'aux'")

    params = init_mdd_params(cfg, tcfg.seed)
    if cfg.conditioning == "aux":
        params.update({n: p.copy() for n, p in aux_checkpoint.params.items()})
    trainable = set()
    for n in params:
        if tcfg.freeze_conv and _is_conv(n):
            continue
        if n.startswith("aux.") and not joint:
            continue
        trainable.add(n)
    opt = AdamState.for_params({n: params[n] for n in trainable}, lr=tcfg.learning_rate)
    l1_index = _indices(cfg.l1_classes)
    l2_index = _indices(cfg.l2_classes)
    log = _LogWriter(log_path)
    valid_batches = make_batches(valid_records, tcfg.batch_size, inv, l1_index, l2_index, features=features)

    rows: list[dict] = []
    steps: list[LossBreakdown] = []
    best_metric = float("inf")
    best_params: dict[str, np.ndarray] = {n: p.copy() for n, p in params.items()}
    best_epoch = 0
    since_best = 0
    for epoch in range(1, tcfg.max_epochs + 1):
        batches = make_batches(
            train_records, tcfg.batch_size, inv, l1_index, l2_index,
            seed=_epoch_seed(tcfg.seed, epoch), shuffle=True, features=features,
        )
        epoch_bds = []
        for batch in batches:
            P = wrap_params(params, trainable)
            with Tape() as tape:
                total, bd, _ = _mdd_batch_loss(P, cfg, acfg, batch, tcfg, joint)
                if total is None:
                    continue  # every target in the batch needs more frames than it has
            grads = backward(tape, total)
            adam_step(params, _grads_by_name(P, grads), opt)
            epoch_bds.append(bd)
            steps.append(bd)
            row = _log_row(epoch, "step", bd)
            rows.append(row)
            log.write(row)

        report, val_bd = _mdd_validate(params, cfg, acfg, valid_batches, valid_records, inv, tcfg, joint)
        train_row = _log_row(epoch, "train", _mean_breakdown(epoch_bds))
        valid_row = _log_row(epoch, "valid", val_bd, per=report.per, frr=report.frr)
        for row in (train_row, valid_row):
            rows.append(row)
            log.write(row)

        if report.per < best_metric:
            best_metric = report.per
            best_params = {n: p.copy() for n, p in params.items()}
            best_epoch = epoch
            since_best = 0
        else:
            since_best += 1
        if since_best >= tcfg.patience:
            break

    ck = Checkpoint(
        kind="mdd",
        model=model_config_to_dict(cfg),
        aux_model=None if acfg is None else aux_config_to_dict(acfg),
        train=train_config_to_dict(tcfg),
        params=best_params,
        opt=opt,
        epoch=best_epoch,
        best_metric=best_metric,
    )
    return TrainResult(ck, rows, steps, best_epoch, best_metric)


def train_mdd_sequential(train_records, valid_records, features, inv, cfg, tcfg, aux_checkpoint, log_path=None) -> TrainResult:
    return train_mdd(
        train_records, valid_records, features, inv, cfg, tcfg,
        aux_checkpoint=aux_checkpoint, joint=False, log_path=log_path,
    )


def train_mdd_joint(train_records, valid_records, features, inv, cfg, tcfg, aux_checkpoint, log_path=None) -> TrainResult:
    return train_mdd(
        train_records, valid_records, features, inv, cfg, tcfg,
        aux_checkpoint=aux_checkpoint, joint=True, log_path=log_path,
    )


# ---------------------------------------------------------------------------
# decoding and evaluation of a trained model

def decode_dataset(
    checkpoint: Checkpoint,
    records: list[UtteranceRecord],
    features: dict[str, np.ndarray],
    inv: PhonemeInventory,
    batch_size: int = 32,
) -> list[EvalItem]:
    cfg = checkpoint.model_config()
    acfg = checkpoint.aux_config()
    batches = make_batches(
        records, batch_size, inv, _indices(cfg.l1_classes), _indices(cfg.l2_classes), features=features
    )
    by_id = {rec.utt_id: rec for rec in records}
    items = []
    for batch in batches:
        P = wrap_params(checkpoint.params, trainable=set())
        l1s, l2s = _batch_languages(batch, cfg.l1_classes, cfg.l2_classes)
        out = mdd_forward_batch(
            P, cfg, Tensor(batch.features), batch.frame_lengths,
            canonical=batch.canonical if cfg.phoneme_encoder else None,
            canonical_lengths=batch.canonical_lengths if cfg.phoneme_encoder else None,
            l1=l1s, l2=l2s, acfg=acfg,
        )
        lp = T.log_softmax(out.logits, axis=-1).data
        for i, utt_id in enumerate(batch.utt_ids):
            ids = greedy_decode(lp[i, : int(out.frame_length[i])], cfg.blank_id)
            rec = by_id[utt_id]
            items.append(EvalItem(rec.l2, rec.canonical, rec.annotated, decode_ids(ids, inv)))
    return items


def evaluate_checkpoint(checkpoint, records, features, inv, batch_size: int = 32) -> MetricsReport:
    return evaluate_dataset(decode_dataset(checkpoint, records, features, inv, batch_size))


# ---------------------------------------------------------------------------
# ablation battery

ABLATION_VARIANTS = (
    "mono",
    "mono-text",
    "multi",
    "multi-text",
    "multi-text-l2",
    "multi-text-l1",
    "multi-text-l1l2",
    "multi-text-aux-seq",
    "multi-text-aux-joint",
)

_VARIANT_SETTINGS = {
    "mono": ("none", False),
    "mono-text": ("none", True),
    "multi": ("none", False),
    "multi-text": ("none", True),
    "multi-text-l2": ("onehot-l2", True),
    "multi-text-l1": ("onehot-l1", True),
    "multi-text-l1l2": ("onehot-l1l2", True),
    "multi-text-aux-seq": ("aux", True),
    "multi-text-aux-joint": ("aux", True),
}


@dataclass
class AblationEntry:
    variant: str
    report: MetricsReport
    best_epoch: int
    valid_per: float


def run_ablation(
    train_records: list[UtteranceRecord],
    valid_records: list[UtteranceRecord],
    test_records: list[UtteranceRecord],
    features: dict[str, np.ndarray],
    inv: PhonemeInventory,
    l1_classes: tuple[str, ...],
    l2_classes: tuple[str, ...],
    tcfg: TrainConfig,
    model_kw: dict | None = None,
    aux_kw: dict | None = None,
    variants: tuple[str, ...] | None = None,
    out_dir: str | Path | None = None,
    aux_tcfg: TrainConfig | None = None,
) -> dict[str, AblationEntry]:
    """Train and evaluate the requested variants under one seed.

    Batch order depends only on (seed, epoch), so every variant consumes the
    same orderings. The two aux variants share one pretrained classifier,
    trained with `aux_tcfg` when given (the classifier usually wants a hotter
    schedule than the recognizers) and with `tcfg` otherwise.
    Per-L2 "mono" models are merged into a single report over the test set.
    """
    variants = tuple(variants) if variants is not None else ABLATION_VARIANTS
    unknown = set(variants) - set(ABLATION_VARIANTS)
    if unknown:
        raise ConfigError(f"unknown ablation variants {sorted(unknown)}")
    model_kw = dict(model_kw or {})
    d0 = next(iter(features.values())).shape[1] if features else 12

    def build_cfg(num_symbols: int, variant: str) -> ModelConfig:
        conditioning, phoneme_encoder = _VARIANT_SETTINGS[variant]
        return ModelConfig(
            num_symbols=num_symbols,
            d0=d0,
            l1_classes=tuple(l1_classes),
            l2_classes=tuple(l2_classes),
            conditioning=conditioning,
            phoneme_encoder=phoneme_encoder,
            **model_kw,
        )

    aux_ck: Checkpoint | None = None
    acfg: AuxConfig | None = None
    if any(v.startswith("multi-text-aux") for v in variants):
        acfg = AuxConfig(d0=d0, l1_classes=tuple(l1_classes), l2_classes=tuple(l2_classes), **dict(aux_kw or {}))
        aux_ck = train_aux(train_records, valid_records, features, inv, acfg, aux_tcfg or tcfg).checkpoint
        if out_dir:
            save_checkpoint(aux_ck, Path(out_dir) / "aux.ck")

    results: dict[str, AblationEntry] = {}
    for variant in variants:
        if variant.startswith("mono"):
            items = []
            best_epochs = []
            valid_pers = []
            for l2 in l2_classes:
                sub_inv = inv.sub_inventory(l2)
                cfg = build_cfg(len(sub_inv.symbols), variant)
                tr = [r for r in train_records if r.l2 == l2]
                va = [r for r in valid_records if r.l2 == l2]
                te = [r for r in test_records if r.l2 == l2]
                res = train_mdd(tr, va, features, sub_inv, cfg, tcfg)
                items.extend(decode_dataset(res.checkpoint, te, features, sub_inv, tcfg.batch_size))
                best_epochs.append(res.best_epoch)
                valid_pers.append(res.best_metric)
                if out_dir:
                    save_checkpoint(res.checkpoint, Path(out_dir) / f"{variant}-{l2}.ck")
            entry = AblationEntry(variant, evaluate_dataset(items), max(best_epochs), float(np.mean(valid_pers)))
        else:
            cfg = build_cfg(len(inv.symbols), variant)
            res = train_mdd(
                train_records, valid_records, features, inv, cfg, tcfg,
                acfg=acfg if cfg.conditioning == "aux" else None,
                aux_checkpoint=aux_ck if cfg.conditioning == "aux" else None,
                joint=variant.endswith("joint"),
            )
            report = evaluate_checkpoint(res.checkpoint, test_records, features, inv, tcfg.batch_size)
            entry = AblationEntry(variant, report, res.best_epoch, res.best_metric)
            if out_dir:
                save_checkpoint(res.checkpoint, Path(out_dir) / f"{variant}.ck")
        results[variant] = entry
    return results


def ablation_table(results: dict[str, AblationEntry]) -> str:
    """Fixed-width text table; one row per variant, no omissions."""
    lines = [f"{'variant':24} {'PER%':>8} {'FRR%':>8} {'prec':>7} {'rec':>7} {'F1':>7}"]
    for name, e in results.items():
        r = e.report
        lines.append(
            f"{name:24} {r.per:8.2f} {100 * r.frr:8.2f} {r.precision:7.3f} {r.recall:7.3f} {r.f1:7.3f}"
        )
    return "\n".join(lines)
