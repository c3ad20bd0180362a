"""Manifest and feature-file ingestion plus padded batching.

Manifests are JSON Lines, one utterance per line, fields exactly
{utt_id, features, canonical, annotated, l1, l2}. Feature files are binary:
magic b"L1MD", u32 format version, u32 T0, u32 D0, then T0*D0 little-endian
float32 values row-major.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import rng as rngmod
from .errors import InputError, ManifestError, ValidationError
from .inventory import PhonemeInventory

FEATURE_MAGIC = b"L1MD"
FEATURE_VERSION = 1
_FIELDS = ("utt_id", "features", "canonical", "annotated", "l1", "l2")


@dataclass
class UtteranceRecord:
    utt_id: str
    features: str  # path, possibly relative to the manifest's directory
    canonical: list[str]
    annotated: list[str]
    l1: str
    l2: str

    def to_json_dict(self) -> dict:
        return {
            "utt_id": self.utt_id,
            "features": self.features,
            "canonical": list(self.canonical),
            "annotated": list(self.annotated),
            "l1": self.l1,
            "l2": self.l2,
        }


def _validate_record(obj: dict, lineno: int, inv: PhonemeInventory | None) -> UtteranceRecord:
    for f in _FIELDS:
        if f not in obj:
            raise ValidationError(f"line {lineno}: missing field {f!r}")
    extra = set(obj) - set(_FIELDS)
    if extra:
        raise ValidationError(f"line {lineno}: unexpected fields {sorted(extra)}")
    for f in ("utt_id", "features", "l1", "l2"):
        if not isinstance(obj[f], str) or not obj[f]:
            raise ValidationError(f"line {lineno}: field {f!r} must be a nonempty string")
    for f in ("canonical", "annotated"):
        seq = obj[f]
        if not isinstance(seq, list) or not seq or not all(isinstance(s, str) for s in seq):
            raise ValidationError(f"line {lineno}: field {f!r} must be a nonempty list of symbols")
        if inv is not None:
            for i, sym in enumerate(seq):
                if sym not in inv:
                    raise ValidationError(f"line {lineno}: unknown phoneme {sym!r} at {f}[{i}]")
    return UtteranceRecord(
        utt_id=obj["utt_id"],
        features=obj["features"],
        canonical=list(obj["canonical"]),
        annotated=list(obj["annotated"]),
        l1=obj["l1"],
        l2=obj["l2"],
    )


def load_manifest(path: str | Path, inv: PhonemeInventory | None = None) -> list[UtteranceRecord]:
    path = Path(path)
    if not path.exists():
        raise InputError(f"manifest not found: {path}")
    records = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ManifestError(f"line {lineno}: not valid JSON: {e.msg}") from None
            if not isinstance(obj, dict):
                raise ManifestError(f"line {lineno}: expected a JSON object")
            records.append(_validate_record(obj, lineno, inv))
    return records


def write_manifest(records: list[UtteranceRecord], path: str | Path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json_dict(), sort_keys=True, ensure_ascii=False) + "\n")


def write_features(matrix: np.ndarray, path: str | Path) -> None:
    m = np.ascontiguousarray(matrix, dtype="<f4")
    if m.ndim != 2 or m.shape[0] < 1:
        raise InputError(f"feature matrix must be T x D with T >= 1, got shape {m.shape}")
    with Path(path).open("wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<III", FEATURE_VERSION, m.shape[0], m.shape[1]))
        fh.write(m.tobytes())


def read_features(path: str | Path) -> np.ndarray:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < 16 or blob[:4] != FEATURE_MAGIC:
        raise InputError(f"{path}: not a feature file (bad magic)")
    version, t0, d0 = struct.unpack("<III", blob[4:16])
    if version != FEATURE_VERSION:
        raise InputError(f"{path}: unsupported feature format version {version}")
    expected = 16 + 4 * t0 * d0
    if len(blob) != expected:
        raise InputError(f"{path}: truncated feature file ({len(blob)} bytes, expected {expected})")
    m = np.frombuffer(blob, dtype="<f4", offset=16).reshape(t0, d0)
    return m.astype(np.float64)


def resolve_features(rec: UtteranceRecord, manifest_dir: str | Path) -> np.ndarray:
    p = Path(rec.features)
    if not p.is_absolute():
        p = Path(manifest_dir) / p
    return read_features(p)


@dataclass
class Batch:
    utt_ids: list[str]
    features: np.ndarray  # B x T_max x D0
    frame_lengths: np.ndarray  # B ints
    frame_mask: np.ndarray  # B x T_max, 1.0 on real frames
    canonical: np.ndarray  # B x L_max int ids
    canonical_lengths: np.ndarray
    annotated: np.ndarray  # B x L'_max int ids
    annotated_lengths: np.ndarray
    l1_ids: np.ndarray
    l2_ids: np.ndarray

    def __len__(self):
        return len(self.utt_ids)


def _pad_ids(seqs: list[list[int]]) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    width = max(1, int(lengths.max(initial=0)))
    out = np.zeros((len(seqs), width), dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out, lengths


def make_batches(
    records: list[UtteranceRecord],
    batch_size: int,
    inv: PhonemeInventory,
    l1_index: dict[str, int],
    l2_index: dict[str, int],
    manifest_dir: str | Path = ".",
    seed: int = 0,
    shuffle: bool = False,
    features: dict[str, np.ndarray] | None = None,
) -> list[Batch]:
    """Batch in manifest order, or shuffled by a dedicated named stream.

    `features` can pre-supply matrices by utt_id to skip file reads.
    """
    if batch_size < 1:
        raise InputError(f"batch_size must be >= 1, got {batch_size}")
    order = list(range(len(records)))
    if shuffle:
        rngmod.stream(seed, "corpus/batch-order").shuffle(order)
    from .inventory import encode  # local import to keep module load light

    batches = []
    for start in range(0, len(order), batch_size):
        chunk = [records[i] for i in order[start : start + batch_size]]
        mats = []
        for rec in chunk:
            if features is not None and rec.utt_id in features:
                mats.append(np.asarray(features[rec.utt_id], dtype=np.float64))
            else:
                mats.append(resolve_features(rec, manifest_dir))
        t_max = max(m.shape[0] for m in mats)
        d0 = mats[0].shape[1]
        feats = np.zeros((len(chunk), t_max, d0))
        mask = np.zeros((len(chunk), t_max))
        for i, m in enumerate(mats):
            if m.shape[1] != d0:
                raise InputError(f"feature dim mismatch in batch: {m.shape[1]} vs {d0}")
            feats[i, : m.shape[0]] = m
            mask[i, : m.shape[0]] = 1.0
        canon, canon_len = _pad_ids([encode(r.canonical, inv) for r in chunk])
        annot, annot_len = _pad_ids([encode(r.annotated, inv) for r in chunk])
        try:
            l1 = np.array([l1_index[r.l1] for r in chunk], dtype=np.int64)
            l2 = np.array([l2_index[r.l2] for r in chunk], dtype=np.int64)
        except KeyError as e:
            raise ValidationError(f"language {e.args[0]!r} not in the configured index") from None
        batches.append(
            Batch(
                utt_ids=[r.utt_id for r in chunk],
                features=feats,
                frame_lengths=np.array([m.shape[0] for m in mats], dtype=np.int64),
                frame_mask=mask,
                canonical=canon,
                canonical_lengths=canon_len,
                annotated=annot,
                annotated_lengths=annot_len,
                l1_ids=l1,
                l2_ids=l2,
            )
        )
    return batches
