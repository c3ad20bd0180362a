"""Alignment, token verdicts, and pronunciation metrics.

Scoring compares three sequences per utterance: the canonical prompt, the
annotated (actually produced) phonemes, and the model's prediction. Two
pairwise alignments against the canonical sequence give each canonical
position an annotated surface and a predicted surface, and those two
surfaces decide the verdict:

    annotated matches canonical, prediction matches     -> TA
    annotated matches canonical, prediction differs     -> FR
    annotated differs, prediction matches canonical     -> FA
    both differ, surfaces agree                         -> TR_CD
    both differ, surfaces disagree                      -> TR_DE

Insertions do not occupy a canonical position; they are counted separately
and excluded from the verdict partition.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ContractError

MATCH = "match"
SUB = "sub"
DEL = "del"
INS = "ins"

VERDICTS = ("TA", "FR", "FA", "TR_CD", "TR_DE")


@dataclass(frozen=True)
class AlignedPair:
    op: str
    ref: str | None  # None for insertions
    hyp: str | None  # None for deletions


def align(reference: list[str], hypothesis: list[str]) -> list[AlignedPair]:
    """Minimum-edit alignment with unit costs.

    The backtrace prefers match > substitution > deletion > insertion, so
    equal-cost alignments resolve the same way on every platform.
    """
    n, m = len(reference), len(hypothesis)
    d = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n + 1):
        d[i][0] = i
    for j in range(m + 1):
        d[0][j] = j
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            sub = d[i - 1][j - 1] + (reference[i - 1] != hypothesis[j - 1])
            d[i][j] = min(sub, d[i - 1][j] + 1, d[i][j - 1] + 1)

    pairs: list[AlignedPair] = []
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and reference[i - 1] == hypothesis[j - 1] and d[i][j] == d[i - 1][j - 1]:
            pairs.append(AlignedPair(MATCH, reference[i - 1], hypothesis[j - 1]))
            i, j = i - 1, j - 1
        elif i > 0 and j > 0 and d[i][j] == d[i - 1][j - 1] + 1:
            pairs.append(AlignedPair(SUB, reference[i - 1], hypothesis[j - 1]))
            i, j = i - 1, j - 1
        elif i > 0 and d[i][j] == d[i - 1][j] + 1:
            pairs.append(AlignedPair(DEL, reference[i - 1], None))
            i -= 1
        else:
            pairs.append(AlignedPair(INS, None, hypothesis[j - 1]))
            j -= 1
    pairs.reverse()
    return pairs


def edit_distance(alignment: list[AlignedPair]) -> int:
    return sum(1 for p in alignment if p.op != MATCH)


def _canonical_surfaces(alignment: list[AlignedPair]) -> list[str | None]:
    """Hypothesis surface per reference position; insertions are skipped."""
    return [p.hyp for p in alignment if p.op != INS]


def _insertion_count(alignment: list[AlignedPair]) -> int:
    return sum(1 for p in alignment if p.op == INS)


def classify(canonical: list[str], annotated: list[str], predicted: list[str]) -> list[str]:
    """One verdict per canonical position; see the module docstring."""
    ann = _canonical_surfaces(align(canonical, annotated))
    prd = _canonical_surfaces(align(canonical, predicted))
    verdicts = []
    for sym, a, p in zip(canonical, ann, prd):
        a_ok = a == sym
        p_ok = p == sym
        if a_ok and p_ok:
            verdicts.append("TA")
        elif a_ok:
            verdicts.append("FR")
        elif p_ok:
            verdicts.append("FA")
        elif a == p:
            verdicts.append("TR_CD")
        else:
            verdicts.append("TR_DE")
    return verdicts


def per(reference: list[str], hypothesis: list[str]) -> float:
    """100 * (substitutions + deletions + insertions) / len(reference)."""
    if not reference:
        raise ContractError("phoneme error rate needs a nonempty reference")
    return 100.0 * edit_distance(align(reference, hypothesis)) / len(reference)


@dataclass
class MetricsReport:
    counts: dict[str, int]
    insertions_annotated: int
    insertions_predicted: int
    per: float  # percentage, may exceed 100
    frr: float
    precision: float
    recall: float
    f1: float
    zero_denominators: tuple[str, ...]
    by_l2: dict[str, "MetricsReport"] = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        out = {
            "counts": dict(self.counts),
            "insertions_annotated": self.insertions_annotated,
            "insertions_predicted": self.insertions_predicted,
            "per": self.per,
            "frr": self.frr,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "zero_denominators": list(self.zero_denominators),
        }
        if self.by_l2:
            out["by_l2"] = {l2: r.to_json_dict() for l2, r in sorted(self.by_l2.items())}
        return out


def metrics(
    verdicts,
    edit_errors: int = 0,
    annotated_length: int = 0,
    insertions_annotated: int = 0,
    insertions_predicted: int = 0,
) -> MetricsReport:
    """Aggregate verdicts into rates; zero denominators yield 0 and a flag.

    `edit_errors` over `annotated_length` supplies the corpus-level PER;
    leave them at 0 when only detection rates are wanted.
    """
    c = Counter(verdicts)
    unknown = set(c) - set(VERDICTS)
    if unknown:
        raise ContractError(f"unknown verdict labels {sorted(unknown)}")
    counts = {v: c.get(v, 0) for v in VERDICTS}
    tr = counts["TR_CD"] + counts["TR_DE"]
    flagged = []

    def rate(num: int, den: int, name: str) -> float:
        if den == 0:
            flagged.append(name)
            return 0.0
        return num / den

    frr = rate(counts["FR"], counts["TA"] + counts["FR"], "frr")
    precision = rate(tr, tr + counts["FR"], "precision")
    recall = rate(tr, tr + counts["FA"], "recall")
    if precision + recall == 0:
        flagged.append("f1")
        f1 = 0.0
    else:
        f1 = 2 * precision * recall / (precision + recall)
    if annotated_length == 0:
        flagged.append("per")
        per_pct = 0.0
    else:
        per_pct = 100.0 * edit_errors / annotated_length
    return MetricsReport(
        counts=counts,
        insertions_annotated=insertions_annotated,
        insertions_predicted=insertions_predicted,
        per=per_pct,
        frr=frr,
        precision=precision,
        recall=recall,
        f1=f1,
        zero_denominators=tuple(flagged),
    )


@dataclass(frozen=True)
class EvalItem:
    l2: str
    canonical: list[str]
    annotated: list[str]
    predicted: list[str]


@dataclass
class _Bucket:
    verdicts: list[str] = field(default_factory=list)
    edit_errors: int = 0
    annotated_length: int = 0
    ins_annotated: int = 0
    ins_predicted: int = 0

    def add(self, item: EvalItem) -> None:
        self.verdicts.extend(classify(item.canonical, item.annotated, item.predicted))
        self.edit_errors += edit_distance(align(item.annotated, item.predicted))
        self.annotated_length += len(item.annotated)
        self.ins_annotated += _insertion_count(align(item.canonical, item.annotated))
        self.ins_predicted += _insertion_count(align(item.canonical, item.predicted))

    def report(self) -> MetricsReport:
        return metrics(
            self.verdicts,
            edit_errors=self.edit_errors,
            annotated_length=self.annotated_length,
            insertions_annotated=self.ins_annotated,
            insertions_predicted=self.ins_predicted,
        )


def evaluate_dataset(items: list[EvalItem]) -> MetricsReport:
    """Corpus-level report with a per-L2 breakdown.

    PER is corpus-level: total edit errors over total annotated length,
    not a mean of per-utterance rates.
    """
    overall = _Bucket()
    per_l2: dict[str, _Bucket] = {}
    for item in items:
        overall.add(item)
        per_l2.setdefault(item.l2, _Bucket()).add(item)
    report = overall.report()
    report.by_l2 = {l2: b.report() for l2, b in per_l2.items()}
    return report


def write_report(report: MetricsReport, path: str | Path, provenance: dict | None = None) -> None:
    doc = {"metrics": report.to_json_dict(), "provenance": provenance or {}}
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")
