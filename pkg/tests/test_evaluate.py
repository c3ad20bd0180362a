import json
import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from l1mdd.errors import ContractError
from l1mdd.evaluate import (
    AlignedPair,
    EvalItem,
    align,
    classify,
    edit_distance,
    evaluate_dataset,
    metrics,
    per,
    write_report,
)

SYMS = st.sampled_from(["a", "b", "c", "d"])
SEQ = st.lists(SYMS, max_size=6)


class TestAlign:
    def test_single_substitution(self):
        pairs = align(["k", "ae", "t"], ["k", "aa", "t"])
        assert [p.op for p in pairs] == ["match", "sub", "match"]
        assert edit_distance(pairs) == 1

    def test_identity(self):
        pairs = align(["x", "y"], ["x", "y"])
        assert all(p.op == "match" for p in pairs)
        assert edit_distance(pairs) == 0

    def test_deletion(self):
        pairs = align(["a", "b"], ["a"])
        assert [p.op for p in pairs] == ["match", "del"]

    def test_insertion(self):
        pairs = align(["a"], ["a", "b"])
        assert [p.op for p in pairs] == ["match", "ins"]

    def test_empty_both(self):
        assert align([], []) == []

    def test_backtrace_prefers_match_over_indel_pair(self):
        # "ab" vs "ba" could be del+match+ins (cost 2) or sub+sub (cost 2);
        # the match-first backtrace must pick an alignment of minimal cost
        pairs = align(["a", "b"], ["b", "a"])
        assert edit_distance(pairs) == 2

    @given(SEQ, SEQ)
    def test_reading_invariants(self, ref, hyp):
        pairs = align(ref, hyp)
        assert [p.ref for p in pairs if p.op != "ins"] == ref
        assert [p.hyp for p in pairs if p.op != "del"] == hyp

    @given(SEQ, SEQ)
    def test_distance_symmetric(self, a, b):
        assert edit_distance(align(a, b)) == edit_distance(align(b, a))

    @given(SEQ, SEQ)
    def test_distance_bounds(self, a, b):
        d = edit_distance(align(a, b))
        assert abs(len(a) - len(b)) <= d <= max(len(a), len(b))


class TestClassify:
    def test_accept_and_false_reject(self):
        assert classify(["p", "q"], ["p", "q"], ["p", "r"]) == ["TA", "FR"]

    def test_correct_diagnosis(self):
        assert classify(["p"], ["r"], ["r"]) == ["TR_CD"]

    def test_false_accept(self):
        assert classify(["p"], ["r"], ["p"]) == ["FA"]

    def test_diagnosis_error(self):
        assert classify(["p"], ["r"], ["s"]) == ["TR_DE"]

    def test_deletion_both_sides_agrees(self):
        # speaker dropped the phoneme and the model predicted the drop
        assert classify(["p", "q"], ["p"], ["p"]) == ["TA", "TR_CD"]

    def test_insertions_excluded_from_partition(self):
        v = classify(["p"], ["p", "x"], ["p"])
        assert v == ["TA"]

    @given(SEQ)
    def test_identity_all_ta(self, x):
        assert classify(x, x, x) == ["TA"] * len(x)

    @given(SEQ, SEQ)
    def test_partition_complete(self, canonical, annotated):
        v = classify(canonical, annotated, annotated)
        assert len(v) == len(canonical)

    @given(SEQ, SEQ)
    def test_perfect_detector(self, canonical, annotated):
        # predicted == annotated: no false rejects, no false accepts,
        # and every rejection carries the right diagnosis
        v = classify(canonical, annotated, annotated)
        assert "FR" not in v and "FA" not in v and "TR_DE" not in v


class TestPer:
    def test_identical_zero(self):
        assert per(["a", "b", "c"], ["a", "b", "c"]) == 0.0

    def test_one_substitution_of_three(self):
        assert abs(per(["a", "b", "c"], ["a", "x", "c"]) - 100.0 / 3.0) < 1e-12

    def test_insertions_can_exceed_hundred(self):
        assert per(["a"], ["a", "b", "c"]) == 200.0

    def test_empty_reference_rejected(self):
        with pytest.raises(ContractError):
            per([], ["a"])


class TestMetrics:
    def test_frr_half(self):
        r = metrics(["TA", "FR"])
        assert abs(r.frr - 0.5) < 1e-12

    def test_precision_recall_f1(self):
        r = metrics(["TR_CD", "TR_DE", "FR", "FA"])
        assert abs(r.precision - 2 / 3) < 1e-12
        assert abs(r.recall - 2 / 3) < 1e-12
        assert abs(r.f1 - 2 / 3) < 1e-12

    def test_degenerate_all_correct(self):
        r = metrics(["TA", "TA"])
        assert r.frr == 0.0
        assert r.precision == 0.0 and r.recall == 0.0
        assert "precision" in r.zero_denominators
        assert "recall" in r.zero_denominators
        assert "frr" not in r.zero_denominators

    def test_empty_everything_flagged(self):
        r = metrics([])
        assert set(r.zero_denominators) == {"frr", "precision", "recall", "f1", "per"}
        assert r.per == 0.0

    def test_counts_partition(self):
        labels = ["TA", "TA", "FR", "FA", "TR_CD", "TR_DE", "TA"]
        r = metrics(labels)
        assert sum(r.counts.values()) == len(labels)

    def test_unknown_label_rejected(self):
        with pytest.raises(ContractError):
            metrics(["TA", "BOGUS"])

    def test_per_passthrough(self):
        r = metrics(["TA"], edit_errors=1, annotated_length=4)
        assert abs(r.per - 25.0) < 1e-12

    def test_rates_bounded(self):
        r = metrics(["TA", "FR", "FA", "TR_CD", "TR_DE"] * 3)
        for v in (r.frr, r.precision, r.recall, r.f1):
            assert 0.0 <= v <= 1.0


class TestEvaluateDataset:
    def items(self):
        return [
            EvalItem("en", ["p", "q"], ["p", "q"], ["p", "r"]),
            EvalItem("zh", ["p"], ["r"], ["r"]),
            EvalItem("en", ["p"], ["r"], ["p"]),
        ]

    def test_overall_counts(self):
        r = evaluate_dataset(self.items())
        assert r.counts == {"TA": 1, "FR": 1, "FA": 1, "TR_CD": 1, "TR_DE": 0}

    def test_by_l2_partition(self):
        r = evaluate_dataset(self.items())
        assert set(r.by_l2) == {"en", "zh"}
        for v in ("TA", "FR", "FA", "TR_CD", "TR_DE"):
            assert sum(sub.counts[v] for sub in r.by_l2.values()) == r.counts[v]

    def test_corpus_per_is_ratio_of_sums(self):
        # item 1: annotated [p,q] vs predicted [p,r] -> 1 error over 2
        # item 2: [r] vs [r] -> 0 over 1; item 3: [r] vs [p] -> 1 over 1
        r = evaluate_dataset(self.items())
        assert abs(r.per - 100.0 * 2 / 4) < 1e-12

    def test_order_invariance(self):
        items = self.items() * 3
        a = evaluate_dataset(items)
        shuffled = items[:]
        random.Random(7).shuffle(shuffled)
        b = evaluate_dataset(shuffled)
        assert a.to_json_dict() == b.to_json_dict()

    def test_insertion_counters(self):
        r = evaluate_dataset([EvalItem("en", ["p"], ["p", "x"], ["p", "y", "z"])])
        assert r.insertions_annotated == 1
        assert r.insertions_predicted == 2
        assert r.counts["TA"] == 1


def test_report_file_round_trip(tmp_path):
    r = evaluate_dataset([EvalItem("en", ["p", "q"], ["p", "q"], ["p", "q"])])
    out = tmp_path / "report.json"
    write_report(r, out, provenance={"checkpoint": "ck.bin"})
    doc = json.loads(out.read_text())
    assert doc["metrics"]["counts"]["TA"] == 2
    assert doc["provenance"]["checkpoint"] == "ck.bin"


def test_aligned_pair_shape():
    p = AlignedPair("del", "a", None)
    assert (p.op, p.ref, p.hyp) == ("del", "a", None)
