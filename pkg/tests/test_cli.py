"""End-to-end checks of the command-line surface: exit codes, artifacts,
run manifests, and idempotence."""

import hashlib
import json
import subprocess
import sys
from pathlib import Path

import pytest

from l1mdd.cli import main
from l1mdd.inventory import load_inventory
from l1mdd.training import load_checkpoint


def sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


TINY_TRAIN = {
    "train": {"max_epochs": 2, "batch_size": 8, "patience": 2, "learning_rate": 1e-3},
    "model": {
        "d_model": 8, "d_emb": 4, "d_h": 4, "d_attn": 8, "d_eps": 8, "d_proj": 8,
        "conv": [[8, 3, 2]], "n_blocks": 1, "n_heads": 2, "d_ffn": 16,
    },
    "aux": {
        "d_model": 8, "d_eps": 8, "conv": [[8, 3, 2]], "n_blocks": 1, "n_heads": 2, "d_ffn": 16,
    },
}


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "corpus"
    rc = main([
        "synth", "--out", str(out), "--seed", "5",
        "--train-count", "16", "--dev-count", "8", "--test-count", "8",
    ])
    assert rc == 0
    return out


@pytest.fixture(scope="module")
def config_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.json"
    path.write_text(json.dumps(TINY_TRAIN))
    return path


@pytest.fixture(scope="module")
def trained(corpus, config_path, tmp_path_factory):
    out = tmp_path_factory.mktemp("run") / "model.ck"
    rc = main([
        "train", "--corpus", str(corpus), "--out", str(out),
        "--config", str(config_path), "--conditioning", "onehot-l1l2",
    ])
    assert rc == 0
    return out


class TestExitCodes:
    def test_usage_error_is_2(self):
        with pytest.raises(SystemExit) as exc:
            main(["synth", "--no-such-flag"])
        assert exc.value.code == 2

    def test_missing_subcommand_is_2(self):
        with pytest.raises(SystemExit) as exc:
            main([])
        assert exc.value.code == 2

    def test_config_error_is_3(self, corpus, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"train": {"no_such_field": 1}}))
        rc = main(["train-aux", "--corpus", str(corpus), "--out", str(tmp_path / "x.ck"),
                   "--config", str(bad)])
        assert rc == 3
        line = capsys.readouterr().err.strip().splitlines()[-1]
        parsed = json.loads(line)  # single machine-parseable line
        assert parsed["error"] == "config"

    def test_malformed_json_config_is_3(self, corpus, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        rc = main(["train-aux", "--corpus", str(corpus), "--out", str(tmp_path / "x.ck"),
                   "--config", str(bad)])
        assert rc == 3

    def test_aux_conditioning_without_checkpoint_is_3(self, corpus, config_path, tmp_path):
        rc = main(["train", "--corpus", str(corpus), "--out", str(tmp_path / "x.ck"),
                   "--config", str(config_path), "--conditioning", "aux"])
        assert rc == 3

    def test_runtime_error_is_1(self, corpus, tmp_path, capsys):
        garbage = tmp_path / "junk.ck"
        garbage.write_bytes(b"not a checkpoint")
        rc = main(["eval", "--checkpoint", str(garbage),
                   "--manifest", str(corpus / "test.jsonl"),
                   "--report", str(tmp_path / "r.json")])
        assert rc == 1
        parsed = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
        assert parsed["error"] != "config"

    def test_missing_corpus_is_1(self, tmp_path):
        rc = main(["train-aux", "--corpus", str(tmp_path / "nope"), "--out", str(tmp_path / "x.ck")])
        assert rc == 1

    def test_unknown_ablation_variant_is_3(self, corpus, config_path, tmp_path):
        rc = main(["ablate", "--corpus", str(corpus), "--out-dir", str(tmp_path / "ab"),
                   "--config", str(config_path), "--variants", "multi,nonsense"])
        assert rc == 3


class TestBuildInventory:
    def test_default_symbols(self, tmp_path):
        out = tmp_path / "inv.json"
        assert main(["build-inventory", "--langs", "en,zh,ar", "--out", str(out)]) == 0
        inv = load_inventory(out)
        assert set(inv.languages) == {"ar", "en", "zh"}
        assert "c0" in inv and "en0" in inv
        manifest = json.loads(Path(str(out) + ".run.json").read_text())
        assert manifest["command"] == "build-inventory"
        assert manifest["outputs"][0]["sha256"] == sha(out)

    def test_config_mapping(self, tmp_path):
        cfg = tmp_path / "inv.json"
        cfg.write_text(json.dumps({"languages": {"aa": ["x", "y"], "bb": ["y", "z"]}}))
        out = tmp_path / "union.json"
        assert main(["build-inventory", "--config", str(cfg), "--out", str(out)]) == 0
        inv = load_inventory(out)
        assert [s.symbol for s in inv.symbols] == ["x", "y", "z"]

    def test_langs_missing_from_config_is_3(self, tmp_path):
        cfg = tmp_path / "inv.json"
        cfg.write_text(json.dumps({"languages": {"aa": ["x"]}}))
        assert main(["build-inventory", "--config", str(cfg), "--langs", "aa,cc",
                     "--out", str(tmp_path / "o.json")]) == 3


class TestSynth:
    def test_layout_and_manifest(self, corpus):
        for name in ("train.jsonl", "dev.jsonl", "test.jsonl", "inventory.json", "run.json"):
            assert (corpus / name).exists()
        run = json.loads((corpus / "run.json").read_text())
        assert run["seed"] == 5
        for entry in run["outputs"]:
            assert sha(Path(entry["path"])) == entry["sha256"]

    def test_idempotent_given_same_seed(self, corpus, tmp_path):
        again = tmp_path / "again"
        rc = main(["synth", "--out", str(again), "--seed", "5",
                   "--train-count", "16", "--dev-count", "8", "--test-count", "8"])
        assert rc == 0
        for name in ("train.jsonl", "dev.jsonl", "test.jsonl", "inventory.json"):
            assert (again / name).read_bytes() == (corpus / name).read_bytes()

    def test_config_override_knob(self, tmp_path):
        cfg = tmp_path / "s.json"
        cfg.write_text(json.dumps({"noise_sigma": 0.1, "counts": {"train": 4, "dev": 2, "test": 2}}))
        out = tmp_path / "c"
        assert main(["synth", "--out", str(out), "--config", str(cfg)]) == 0
        run = json.loads((out / "run.json").read_text())
        assert run["config"]["noise_sigma"] == 0.1
        assert run["config"]["counts"]["train"] == 4

    def test_unknown_synth_key_is_3(self, tmp_path):
        cfg = tmp_path / "s.json"
        cfg.write_text(json.dumps({"wavelength": 3}))
        assert main(["synth", "--out", str(tmp_path / "c"), "--config", str(cfg)]) == 3


class TestTrainAndScore:
    def test_train_aux_writes_artifacts(self, corpus, config_path, tmp_path):
        out = tmp_path / "aux.ck"
        rc = main(["train-aux", "--corpus", str(corpus), "--out", str(out),
                   "--config", str(config_path)])
        assert rc == 0
        ck = load_checkpoint(out)
        assert ck.kind == "aux"
        log = Path(str(out) + ".log.jsonl")
        rows = [json.loads(line) for line in log.read_text().splitlines()]
        assert any(r["split"] == "valid" for r in rows)
        run = json.loads(Path(str(out) + ".run.json").read_text())
        assert {e["path"] for e in run["outputs"]} == {str(out), str(log)}

    def test_train_flags_override_config(self, corpus, config_path, tmp_path):
        out = tmp_path / "m.ck"
        rc = main(["train", "--corpus", str(corpus), "--out", str(out),
                   "--config", str(config_path), "--epochs", "1", "--seed", "9"])
        assert rc == 0
        run = json.loads(Path(str(out) + ".run.json").read_text())
        assert run["config"]["train"]["max_epochs"] == 1
        assert run["config"]["train"]["seed"] == 9 == run["seed"]
        ck = load_checkpoint(out)
        assert ck.train["max_epochs"] == 1

    def test_checkpoint_records_conditioning(self, trained):
        ck = load_checkpoint(trained)
        assert ck.kind == "mdd"
        assert ck.model_config().conditioning == "onehot-l1l2"

    def test_decode_rows_cover_manifest(self, corpus, trained, tmp_path):
        out = tmp_path / "decoded.jsonl"
        rc = main(["decode", "--checkpoint", str(trained),
                   "--manifest", str(corpus / "test.jsonl"), "--out", str(out)])
        assert rc == 0
        rows = [json.loads(line) for line in out.read_text().splitlines()]
        manifest_ids = [json.loads(line)["utt_id"]
                        for line in (corpus / "test.jsonl").read_text().splitlines()]
        assert [r["utt_id"] for r in rows] == manifest_ids
        assert all(isinstance(r["predicted"], list) for r in rows)

    def test_eval_report_and_idempotence(self, corpus, trained, tmp_path):
        report = tmp_path / "r.json"
        args = ["eval", "--checkpoint", str(trained),
                "--manifest", str(corpus / "test.jsonl"), "--report", str(report)]
        assert main(args) == 0
        first = report.read_bytes()
        doc = json.loads(first)
        assert set(doc) == {"metrics", "provenance"}
        counts = doc["metrics"]["counts"]
        assert set(counts) == {"TA", "FR", "FA", "TR_CD", "TR_DE"}
        assert main(args) == 0  # same inputs, byte-identical report
        assert report.read_bytes() == first

    def test_same_seed_checkpoints_identical(self, corpus, config_path, tmp_path):
        outs = []
        for name in ("a.ck", "b.ck"):
            out = tmp_path / name
            rc = main(["train", "--corpus", str(corpus), "--out", str(out),
                       "--config", str(config_path), "--epochs", "1", "--seed", "4"])
            assert rc == 0
            outs.append(out.read_bytes())
        assert outs[0] == outs[1]


class TestAblate:
    def test_table_lists_exactly_requested_variants(self, corpus, config_path, tmp_path):
        out_dir = tmp_path / "ab"
        rc = main(["ablate", "--corpus", str(corpus), "--out-dir", str(out_dir),
                   "--config", str(config_path), "--epochs", "1",
                   "--variants", "multi,multi-text-l2"])
        assert rc == 0
        table = (out_dir / "table.txt").read_text()
        body = table.splitlines()[1:]  # header row first
        assert [line.split()[0] for line in body] == ["multi", "multi-text-l2"]
        for variant in ("multi", "multi-text-l2"):
            doc = json.loads((out_dir / f"{variant}.report.json").read_text())
            assert "metrics" in doc
        run = json.loads((out_dir / "run.json").read_text())
        assert run["config"]["variants"] == ["multi", "multi-text-l2"]


def test_console_entry_point_smoke(tmp_path):
    out = tmp_path / "inv.json"
    proc = subprocess.run(
        [sys.executable, "-m", "l1mdd.cli", "build-inventory", "--langs", "en", "--out", str(out)],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0, proc.stderr
    assert out.exists()
    assert proc.stdout == ""  # data goes to files, progress to stderr
