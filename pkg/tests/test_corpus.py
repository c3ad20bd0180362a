import json

import numpy as np
import pytest

from l1mdd import rng as rngmod
from l1mdd.corpus import (
    UtteranceRecord,
    load_manifest,
    make_batches,
    read_features,
    write_features,
    write_manifest,
)
from l1mdd.errors import ConfigError, InputError, ManifestError, ValidationError
from l1mdd.inventory import build_union
from l1mdd.synth import (
    ConfusionRule,
    SynthConfig,
    apply_confusion,
    apply_confusion_aligned,
    build_inventory,
    build_prototypes,
    default_synth_config,
    synthesize_corpus,
)


def small_config(**kw):
    kw.setdefault("counts", {"train": 30, "dev": 8})
    kw.setdefault("symbols_per_language", 6)
    kw.setdefault("feature_dim", 5)
    return SynthConfig(**kw)


@pytest.fixture()
def inv():
    return build_union({"en": ["a", "b"], "zh": ["b", "c"]})


def rec(i=0, feats="x.l1md", canonical=("a", "b"), annotated=("a",), l1="hi", l2="en"):
    return UtteranceRecord(f"u{i}", feats, list(canonical), list(annotated), l1, l2)


class TestManifest:
    def test_empty_file(self, tmp_path):
        p = tmp_path / "m.jsonl"
        p.write_text("")
        assert load_manifest(p) == []

    def test_roundtrip(self, tmp_path, inv):
        records = [rec(0), rec(1, canonical=("c",), annotated=("c", "b"), l2="zh"), rec(2)]
        p = tmp_path / "m.jsonl"
        write_manifest(records, p)
        back = load_manifest(p, inv)
        assert back == records

    def test_missing_l1(self, tmp_path):
        p = tmp_path / "m.jsonl"
        obj = rec().to_json_dict()
        del obj["l1"]
        p.write_text(json.dumps(obj) + "\n")
        with pytest.raises(ValidationError) as ei:
            load_manifest(p)
        assert "l1" in str(ei.value) and "line 1" in str(ei.value)

    def test_malformed_line_number(self, tmp_path):
        p = tmp_path / "m.jsonl"
        p.write_text(json.dumps(rec().to_json_dict()) + "\n{oops\n")
        with pytest.raises(ManifestError) as ei:
            load_manifest(p)
        assert "line 2" in str(ei.value)

    def test_unknown_phoneme_against_inventory(self, tmp_path, inv):
        p = tmp_path / "m.jsonl"
        write_manifest([rec(canonical=("a", "zz"))], p)
        with pytest.raises(ValidationError) as ei:
            load_manifest(p, inv)
        assert "zz" in str(ei.value)

    def test_empty_annotated_rejected(self, tmp_path):
        p = tmp_path / "m.jsonl"
        obj = rec().to_json_dict()
        obj["annotated"] = []
        p.write_text(json.dumps(obj) + "\n")
        with pytest.raises(ValidationError):
            load_manifest(p)

    def test_missing_file(self):
        with pytest.raises(InputError):
            load_manifest("/no/such/manifest.jsonl")


class TestFeatureFiles:
    def test_roundtrip(self, tmp_path):
        m = np.arange(12.0).reshape(3, 4)
        p = tmp_path / "f.l1md"
        write_features(m, p)
        back = read_features(p)
        np.testing.assert_array_equal(back, m)
        assert back.dtype == np.float64

    def test_header_layout(self, tmp_path):
        p = tmp_path / "f.l1md"
        write_features(np.zeros((2, 3)), p)
        blob = p.read_bytes()
        assert blob[:4] == b"L1MD"
        assert int.from_bytes(blob[4:8], "little") == 1
        assert int.from_bytes(blob[8:12], "little") == 2
        assert int.from_bytes(blob[12:16], "little") == 3
        assert len(blob) == 16 + 4 * 6

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "f.l1md"
        p.write_bytes(b"XXXX" + b"\0" * 20)
        with pytest.raises(InputError):
            read_features(p)

    def test_truncated(self, tmp_path):
        p = tmp_path / "f.l1md"
        write_features(np.zeros((2, 3)), p)
        p.write_bytes(p.read_bytes()[:-4])
        with pytest.raises(InputError):
            read_features(p)


class TestBatching:
    def make_records(self, n):
        feats = {f"u{i}": np.full((2 + i % 3, 4), float(i)) for i in range(n)}
        records = [rec(i, canonical=("a",) * (1 + i % 2), annotated=("a",)) for i in range(n)]
        return records, feats

    def test_sizes_70_by_32(self, inv):
        records, feats = self.make_records(70)
        batches = make_batches(records, 32, inv, {"hi": 0}, {"en": 0}, features=feats)
        assert [len(b) for b in batches] == [32, 32, 6]

    def test_no_shuffle_preserves_order(self, inv):
        records, feats = self.make_records(10)
        batches = make_batches(records, 4, inv, {"hi": 0}, {"en": 0}, features=feats)
        flat = [uid for b in batches for uid in b.utt_ids]
        assert flat == [r.utt_id for r in records]

    def test_shuffle_deterministic_and_complete(self, inv):
        records, feats = self.make_records(20)
        kw = dict(inv=inv, l1_index={"hi": 0}, l2_index={"en": 0}, features=feats, shuffle=True, seed=5)
        b1 = make_batches(records, 8, **kw)
        b2 = make_batches(records, 8, **kw)
        order1 = [uid for b in b1 for uid in b.utt_ids]
        assert order1 == [uid for b in b2 for uid in b.utt_ids]
        assert sorted(order1) == sorted(r.utt_id for r in records)
        assert order1 != [r.utt_id for r in records]

    def test_masks_match_lengths(self, inv):
        records, feats = self.make_records(7)
        batches = make_batches(records, 3, inv, {"hi": 0}, {"en": 0}, features=feats)
        for b in batches:
            np.testing.assert_array_equal(b.frame_mask.sum(axis=1), b.frame_lengths)
            assert b.features.shape[1] == b.frame_lengths.max()
            for i in range(len(b)):
                assert (b.features[i, b.frame_lengths[i] :] == 0).all()

    def test_unknown_language_rejected(self, inv):
        records, feats = self.make_records(2)
        with pytest.raises(ValidationError):
            make_batches(records, 2, inv, {"xx": 0}, {"en": 0}, features=feats)


class TestConfusion:
    def test_rule_must_sum_to_one(self):
        with pytest.raises(ConfigError):
            ConfusionRule(keep=0.5, delete=0.3, substitutions={"a": 0.3}).validate("x")

    def test_identity_confusion(self):
        cfg = small_config()
        gen = rngmod.stream(0, "test/identity")
        canonical = cfg.all_symbols() * 3
        assert apply_confusion(canonical, "hi", "en", cfg, gen) == canonical

    def test_forced_substitution(self):
        cfg = small_config(confusions={("hi", "en"): {"c0": ConfusionRule(keep=0.0, substitutions={"en0": 1.0})}})
        gen = rngmod.stream(1, "test/forced")
        out = apply_confusion(["c0", "c1", "c0"], "hi", "en", cfg, gen)
        assert out == ["en0", "c1", "en0"]

    def test_substitution_rate_monte_carlo(self):
        cfg = small_config(confusions={("hi", "en"): {"c0": ConfusionRule(keep=0.8, substitutions={"en0": 0.2})}})
        gen = rngmod.stream(2, "test/mc")
        n = 10_000
        out = apply_confusion(["c0"] * n, "hi", "en", cfg, gen)
        rate = sum(1 for s in out if s == "en0") / n
        assert abs(rate - 0.2) < 0.02

    def test_empty_annotated_guard(self):
        cfg = small_config(confusions={("hi", "en"): {s: ConfusionRule(keep=0.0, delete=1.0) for s in small_config().all_symbols()}})
        gen = rngmod.stream(3, "test/empty")
        out = apply_confusion(["c0", "c1"], "hi", "en", cfg, gen)
        assert out == ["c0"]


class TestSynthesis:
    def test_default_config_shape(self):
        cfg = default_synth_config()
        inv = build_inventory(cfg)
        assert 30 <= len(inv) <= 40
        assert len(cfg.l2_languages) == 3 and len(cfg.l1_languages) == 4

    def test_deterministic_bytes(self, tmp_path):
        cfg = small_config(counts={"train": 12})
        r1 = synthesize_corpus(cfg, tmp_path / "a")
        r2 = synthesize_corpus(cfg, tmp_path / "b")
        m1 = (tmp_path / "a" / "train.jsonl").read_bytes()
        m2 = (tmp_path / "b" / "train.jsonl").read_bytes()
        assert m1 == m2
        for recd in r1.records["train"][:4]:
            f1 = (tmp_path / "a" / recd.features).read_bytes()
            f2 = (tmp_path / "b" / recd.features).read_bytes()
            assert f1 == f2
        assert r2.records == r1.records

    def test_loadable_and_valid(self, tmp_path):
        cfg = small_config(counts={"train": 15})
        res = synthesize_corpus(cfg, tmp_path)
        back = load_manifest(res.manifest_paths["train"], res.inventory)
        assert back == res.records["train"]
        for recd in back:
            m = read_features(tmp_path / recd.features)
            assert m.shape[1] == cfg.feature_dim
            assert m.shape[0] >= len(recd.annotated) * cfg.frames_per_phoneme[0]

    def test_no_insertions(self, tmp_path):
        cfg = default_synth_config(train_count=60, dev_count=4, test_count=4)
        res = synthesize_corpus(cfg, tmp_path)
        subs = 0
        for recd in res.records["train"]:
            assert len(recd.annotated) <= len(recd.canonical)
            # positional walk: every annotated token is a keep or substitute of
            # some canonical position, strictly in order
            j = 0
            for sym in recd.annotated:
                while j < len(recd.canonical):
                    rule = cfg.confusions[(recd.l1, recd.l2)].get(recd.canonical[j], ConfusionRule(keep=1.0))
                    if sym == recd.canonical[j] or sym in rule.substitutions:
                        if sym != recd.canonical[j]:
                            subs += 1
                        j += 1
                        break
                    j += 1
                else:
                    pytest.fail(f"{recd.utt_id}: annotated not reachable without insertion")
        assert subs > 0  # the default config must actually produce mispronunciations

    def test_balanced_language_assignment(self, tmp_path):
        cfg = small_config(counts={"train": 24})
        res = synthesize_corpus(cfg, tmp_path)
        l2s = [r.l2 for r in res.records["train"]]
        l1s = [r.l1 for r in res.records["train"]]
        assert {l2s.count(l) for l in cfg.l2_languages} == {8}
        assert {l1s.count(l) for l in cfg.l1_languages} == {6}

    def test_accent_coloring_moves_kept_tokens(self, tmp_path):
        # zero noise/jitter/shift makes frames equal their prototype exactly,
        # so the colored position can be checked in closed form
        cfg = small_config(
            counts={"train": 60},
            noise_sigma=0.0,
            utterance_jitter_norm=0.0,
            accent_coloring=0.4,
            frames_per_phoneme=(5, 5),
            confusions={("hi", "en"): {"c0": ConfusionRule(keep=1.0, substitutions={"en0": 0.0})}},
        )
        res = synthesize_corpus(cfg, tmp_path)
        protos = build_prototypes(cfg)
        colored = protos["c0"] + 0.4 * (protos["en0"] - protos["c0"])
        hits = misses = 0
        for recd in res.records["train"]:
            if recd.l2 != "en" or "c0" not in recd.annotated:
                continue
            feats = res.features[recd.utt_id]
            i = recd.annotated.index("c0")
            frame = feats[5 * i]
            if recd.l1 == "hi":
                assert np.allclose(frame, colored, atol=1e-5)
                hits += 1
            else:
                assert np.allclose(frame, protos["c0"], atol=1e-5)
                misses += 1
        assert hits > 0 and misses > 0

    def test_zero_coloring_is_the_plain_prototype(self, tmp_path):
        base = dict(
            counts={"train": 12},
            noise_sigma=0.0,
            utterance_jitter_norm=0.0,
            frames_per_phoneme=(5, 5),
            confusions={("hi", "en"): {"c0": ConfusionRule(keep=1.0, substitutions={"en0": 0.0})}},
        )
        res = synthesize_corpus(small_config(accent_coloring=0.0, **base), tmp_path)
        protos = build_prototypes(small_config(accent_coloring=0.0, **base))
        for recd in res.records["train"]:
            for i, sym in enumerate(recd.annotated):
                assert np.allclose(res.features[recd.utt_id][5 * i], protos[sym], atol=1e-5)

    def test_coloring_out_of_range_rejected(self):
        with pytest.raises(ConfigError):
            small_config(accent_coloring=1.0).validate()
        with pytest.raises(ConfigError):
            small_config(accent_coloring=-0.1).validate()

    def test_rule_coloring_overrides_global(self, tmp_path):
        cfg = small_config(
            counts={"train": 40},
            noise_sigma=0.0,
            utterance_jitter_norm=0.0,
            accent_coloring=0.1,
            frames_per_phoneme=(5, 5),
            confusions={("hi", "en"): {"c0": ConfusionRule(keep=1.0, substitutions={"en0": 0.0}, coloring=0.7)}},
        )
        res = synthesize_corpus(cfg, tmp_path)
        protos = build_prototypes(cfg)
        expected = protos["c0"] + 0.7 * (protos["en0"] - protos["c0"])
        hits = 0
        for recd in res.records["train"]:
            if recd.l1 == "hi" and recd.l2 == "en" and "c0" in recd.annotated:
                frame = res.features[recd.utt_id][5 * recd.annotated.index("c0")]
                assert np.allclose(frame, expected, atol=1e-5)
                hits += 1
        assert hits > 0

    def test_undershoot_moves_substituted_tokens(self, tmp_path):
        # all-substitute rule, no deletions: canonical and annotated align 1:1,
        # and realized frames sit 30% of the way back toward the source
        cfg = small_config(
            counts={"train": 40},
            noise_sigma=0.0,
            utterance_jitter_norm=0.0,
            frames_per_phoneme=(5, 5),
            confusions={("hi", "en"): {"c0": ConfusionRule(keep=0.0, substitutions={"en0": 1.0}, undershoot=0.3)}},
        )
        res = synthesize_corpus(cfg, tmp_path)
        protos = build_prototypes(cfg)
        undershot = protos["en0"] + 0.3 * (protos["c0"] - protos["en0"])
        hits = 0
        for recd in res.records["train"]:
            if recd.l1 != "hi" or recd.l2 != "en" or "c0" not in recd.canonical:
                continue
            assert "c0" not in recd.annotated
            assert len(recd.annotated) == len(recd.canonical)
            for i, src in enumerate(recd.canonical):
                frame = res.features[recd.utt_id][5 * i]
                if src == "c0":
                    assert recd.annotated[i] == "en0"
                    assert np.allclose(frame, undershot, atol=1e-5)
                    hits += 1
                elif src == "en0":
                    assert np.allclose(frame, protos["en0"], atol=1e-5)
        assert hits > 0

    def test_aligned_pairs_match_plain_realization(self):
        cfg = small_config(confusions={("hi", "en"): {"c0": ConfusionRule(keep=0.4, delete=0.2, substitutions={"en0": 0.4})}})
        canonical = ["c0", "c1", "c0", "c0", "en0"]
        a = apply_confusion_aligned(canonical, "hi", "en", cfg, rngmod.stream(5, "t"))
        b = apply_confusion(canonical, "hi", "en", cfg, rngmod.stream(5, "t"))
        assert [r for _, r in a] == b
        for src, realized in a:
            assert src in canonical
            assert realized == src or realized == "en0"

    def test_rule_field_ranges_rejected(self):
        with pytest.raises(ConfigError):
            ConfusionRule(keep=1.0, coloring=1.0).validate("c0")
        with pytest.raises(ConfigError):
            ConfusionRule(keep=1.0, undershoot=-0.2).validate("c0")
