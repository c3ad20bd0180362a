"""Command-line pipeline around the library.

Subcommands cover the whole workflow: build a phoneme inventory, synthesize
a corpus, train the auxiliary language classifier and the recognizer, decode
a split, score predictions, and run the ablation battery. Every command
writes a run manifest next to its primary output recording the effective
configuration, the inputs, and a sha256 per artifact, so runs can be audited
and repeated byte for byte (the manifest's own timestamps excepted).

Exit codes: 0 success, 1 runtime failure, 2 usage, 3 bad configuration.
Progress goes to stderr; data only ever goes to files.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
import tempfile
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import rng as rngmod
from .corpus import UtteranceRecord, load_manifest, resolve_features
from .errors import ConfigError, InputError, L1mddError
from .evaluate import evaluate_dataset, write_report
from .inventory import PhonemeInventory, build_union, load_inventory, save_inventory
from .networks import AuxConfig, ConvSpec, ModelConfig
from .synth import SynthConfig, default_synth_config, synthesize_corpus
from .training import (
    ABLATION_VARIANTS,
    TrainConfig,
    ablation_table,
    aux_config_to_dict,
    decode_dataset,
    load_checkpoint,
    model_config_to_dict,
    run_ablation,
    save_checkpoint,
    train_aux,
    train_config_to_dict,
    train_mdd,
)

# ---------------------------------------------------------------------------
# artifacts


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _atomic_write_text(path: Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int | None
    inputs: list[str]
    outputs: list[dict]  # {"path": ..., "sha256": ...}
    started_at: str
    finished_at: str

    def to_json_dict(self) -> dict:
        return dataclasses.asdict(self)


def _write_run_manifest(path, command: str, config: dict, seed, inputs, outputs, started_at: str) -> None:
    man = RunManifest(
        command=command,
        config=config,
        seed=seed,
        inputs=[str(p) for p in inputs],
        outputs=[{"path": str(p), "sha256": _sha256(p)} for p in outputs],
        started_at=started_at,
        finished_at=_utc_now(),
    )
    _atomic_write_text(Path(path), json.dumps(man.to_json_dict(), indent=1, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# config plumbing


def _load_config(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from e
    if not isinstance(doc, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    return doc


def _section_kwargs(section: dict, cls, reserved: set[str]) -> dict:
    """Validate a config-file section against a dataclass's fields."""
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(section) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys {sorted(unknown)}")
    clash = set(section) & reserved
    if clash:
        raise ConfigError(f"{sorted(clash)} are derived from the corpus or flags, not the config file")
    kw = dict(section)
    if "conv" in kw:
        kw["conv"] = tuple(ConvSpec(*spec) for spec in kw["conv"])
    return kw


def _train_config(section: dict, args) -> TrainConfig:
    kw = _section_kwargs(section, TrainConfig, reserved=set())
    if "aux_weights" in kw:
        kw["aux_weights"] = tuple(kw["aux_weights"])
    for flag, field_name in (
        ("seed", "seed"),
        ("epochs", "max_epochs"),
        ("lr", "learning_rate"),
        ("batch_size", "batch_size"),
        ("patience", "patience"),
        ("alpha", "alpha"),
        ("freeze_conv", "freeze_conv"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            kw[field_name] = value
    tcfg = TrainConfig(**kw)
    tcfg.validate()
    return tcfg


def _onoff(value: str) -> bool:
    if value not in ("on", "off"):
        raise argparse.ArgumentTypeError(f"expected on|off, got {value!r}")
    return value == "on"


# ---------------------------------------------------------------------------
# corpus access


def _load_split(corpus: Path, split: str, inv: PhonemeInventory):
    manifest = corpus / f"{split}.jsonl"
    if not manifest.exists():
        raise InputError(f"corpus {corpus} has no {split}.jsonl")
    records = load_manifest(manifest, inv)
    features = {rec.utt_id: resolve_features(rec, corpus) for rec in records}
    return records, features


def _classes(records: list[UtteranceRecord]):
    l1 = tuple(sorted({r.l1 for r in records}))
    l2 = tuple(sorted({r.l2 for r in records}))
    return l1, l2


def _feature_dim(features: dict) -> int:
    first = next(iter(features.values()))
    return int(first.shape[1])


# ---------------------------------------------------------------------------
# subcommands


def _cmd_build_inventory(args) -> None:
    started = _utc_now()
    inputs = []
    if args.config:
        doc = _load_config(args.config)
        inputs.append(args.config)
        mapping = doc.get("languages")
        if not isinstance(mapping, dict) or not all(isinstance(v, list) for v in mapping.values()):
            raise ConfigError("inventory config needs a 'languages' object mapping language -> symbol list")
    else:
        if not args.langs:
            raise ConfigError("need --langs or a config file with a 'languages' section")
        mapping = SynthConfig(l2_languages=tuple(args.langs.split(","))).per_language_symbols()
    if args.langs:
        langs = args.langs.split(",")
        missing = [lang for lang in langs if lang not in mapping]
        if missing:
            raise ConfigError(f"languages {missing} not present in the config")
        mapping = {lang: mapping[lang] for lang in langs}
    inv = build_union(mapping)
    save_inventory(inv, args.out)
    sys.stderr.write(f"build-inventory: {len(inv)} symbols, {len(inv.languages)} languages -> {args.out}\n")
    _write_run_manifest(
        args.run_manifest or f"{args.out}.run.json",
        "build-inventory",
        {"languages": {lang: list(syms) for lang, syms in mapping.items()}},
        None,
        inputs,
        [args.out],
        started,
    )


_SYNTH_KEYS = (
    "feature_dim",
    "noise_sigma",
    "cluster_radius",
    "prototype_scale",
    "utterance_jitter_norm",
    "accent_coloring",
    "frames_per_phoneme",
    "utterance_phonemes",
    "counts",
)


def _apply_synth_overrides(cfg: SynthConfig, overrides: dict) -> None:
    unknown = set(overrides) - set(_SYNTH_KEYS)
    if unknown:
        raise ConfigError(f"unknown synth keys {sorted(unknown)}; allowed: {list(_SYNTH_KEYS)}")
    old_dim = cfg.feature_dim
    for key, value in overrides.items():
        if key in ("frames_per_phoneme", "utterance_phonemes"):
            value = tuple(value)
        if key == "counts":
            value = {split: int(n) for split, n in value.items()}
        setattr(cfg, key, value)
    if cfg.feature_dim != old_dim:
        # accent shift vectors live in feature space; redraw at the new width
        norm = float(np.linalg.norm(cfg.accent_shifts[cfg.l1_languages[0]]))
        gen = rngmod.stream(cfg.seed, "synth/accent-shifts")
        for l1 in cfg.l1_languages:
            v = gen.normal(size=cfg.feature_dim)
            cfg.accent_shifts[l1] = list(v / np.linalg.norm(v) * norm)


def _cmd_synth(args) -> None:
    started = _utc_now()
    seed = args.seed if args.seed is not None else 0
    cfg = default_synth_config(seed=seed)
    inputs = []
    if args.config:
        _apply_synth_overrides(cfg, _load_config(args.config))
        inputs.append(args.config)
    for split, flag in (("train", args.train_count), ("dev", args.dev_count), ("test", args.test_count)):
        if flag is not None:
            cfg.counts[split] = flag
    cfg.validate()
    result = synthesize_corpus(cfg, args.out)
    sys.stderr.write(
        f"synth: {sum(cfg.counts.values())} utterances over {len(result.inventory)} symbols -> {args.out}\n"
    )
    effective = {
        key: getattr(cfg, key) if key != "counts" else dict(cfg.counts)
        for key in _SYNTH_KEYS
    }
    outputs = [result.manifest_paths[s] for s in sorted(result.manifest_paths)]
    outputs.append(Path(args.out) / "inventory.json")
    _write_run_manifest(
        args.run_manifest or Path(args.out) / "run.json",
        "synth", effective, seed, inputs, outputs, started,
    )


def _cmd_train_aux(args) -> None:
    started = _utc_now()
    corpus = Path(args.corpus)
    inv = load_inventory(corpus / "inventory.json")
    train_records, feats = _load_split(corpus, "train", inv)
    valid_records, feats_dev = _load_split(corpus, "dev", inv)
    feats.update(feats_dev)

    doc = _load_config(args.config) if args.config else {}
    tcfg = _train_config(doc.get("train", {}), args)
    l1c, l2c = _classes(train_records)
    aux_kw = _section_kwargs(doc.get("aux", {}), AuxConfig, reserved={"d0", "l1_classes", "l2_classes"})
    acfg = AuxConfig(d0=_feature_dim(feats), l1_classes=l1c, l2_classes=l2c, **aux_kw)
    acfg.validate()

    log_path = args.log or f"{args.out}.log.jsonl"
    result = train_aux(train_records, valid_records, feats, inv, acfg, tcfg, log_path=log_path)
    save_checkpoint(result.checkpoint, args.out)
    sys.stderr.write(
        f"train-aux: best mean class accuracy {result.best_metric:.4f} at epoch {result.best_epoch} -> {args.out}\n"
    )
    config = {"train": train_config_to_dict(tcfg), "aux": aux_config_to_dict(acfg)}
    inputs = [args.config] if args.config else []
    inputs.append(corpus / "train.jsonl")
    inputs.append(corpus / "dev.jsonl")
    _write_run_manifest(
        args.run_manifest or f"{args.out}.run.json",
        "train-aux", config, tcfg.seed, inputs, [args.out, log_path], started,
    )


def _cmd_train(args) -> None:
    started = _utc_now()
    corpus = Path(args.corpus)
    inv = load_inventory(corpus / "inventory.json")
    train_records, feats = _load_split(corpus, "train", inv)
    valid_records, feats_dev = _load_split(corpus, "dev", inv)
    feats.update(feats_dev)

    doc = _load_config(args.config) if args.config else {}
    tcfg = _train_config(doc.get("train", {}), args)
    l1c, l2c = _classes(train_records)
    model_kw = _section_kwargs(
        doc.get("model", {}), ModelConfig,
        reserved={"num_symbols", "d0", "l1_classes", "l2_classes", "conditioning", "phoneme_encoder"},
    )
    model = ModelConfig(
        num_symbols=len(inv),
        d0=_feature_dim(feats),
        l1_classes=l1c,
        l2_classes=l2c,
        conditioning=args.conditioning,
        phoneme_encoder=args.phoneme_encoder,
        **model_kw,
    )
    model.validate()
    aux_ck = load_checkpoint(args.aux_checkpoint) if args.aux_checkpoint else None

    log_path = args.log or f"{args.out}.log.jsonl"
    result = train_mdd(
        train_records, valid_records, feats, inv, model, tcfg,
        aux_checkpoint=aux_ck, joint=args.joint, log_path=log_path,
    )
    save_checkpoint(result.checkpoint, args.out)
    sys.stderr.write(
        f"train: best held-out PER {result.best_metric:.2f} at epoch {result.best_epoch} -> {args.out}\n"
    )
    config = {"train": train_config_to_dict(tcfg), "model": model_config_to_dict(model), "joint": args.joint}
    inputs = [args.config] if args.config else []
    inputs += [corpus / "train.jsonl", corpus / "dev.jsonl"]
    if args.aux_checkpoint:
        inputs.append(args.aux_checkpoint)
    _write_run_manifest(
        args.run_manifest or f"{args.out}.run.json",
        "train", config, tcfg.seed, inputs, [args.out, log_path], started,
    )


def _decode_items(args):
    manifest = Path(args.manifest)
    inv_path = Path(args.inventory) if args.inventory else manifest.parent / "inventory.json"
    inv = load_inventory(inv_path)
    ck = load_checkpoint(args.checkpoint)
    if ck.kind != "mdd":
        raise InputError(f"checkpoint {args.checkpoint} holds a {ck.kind!r} model, expected 'mdd'")
    if ck.model_config().num_symbols != len(inv):
        raise InputError(
            f"checkpoint expects {ck.model_config().num_symbols} symbols, inventory has {len(inv)}"
        )
    records = load_manifest(manifest, inv)
    features = {rec.utt_id: resolve_features(rec, manifest.parent) for rec in records}
    items = decode_dataset(ck, records, features, inv, batch_size=args.batch_size or 32)
    return records, items, inv_path


def _cmd_decode(args) -> None:
    started = _utc_now()
    records, items, inv_path = _decode_items(args)
    lines = []
    for rec, item in zip(records, items):
        row = {
            "utt_id": rec.utt_id,
            "l2": item.l2,
            "canonical": list(item.canonical),
            "annotated": list(item.annotated),
            "predicted": list(item.predicted),
        }
        lines.append(json.dumps(row, sort_keys=True))
    _atomic_write_text(Path(args.out), "\n".join(lines) + "\n")
    sys.stderr.write(f"decode: {len(items)} utterances -> {args.out}\n")
    _write_run_manifest(
        args.run_manifest or f"{args.out}.run.json",
        "decode", {"batch_size": args.batch_size or 32}, None,
        [args.checkpoint, args.manifest, inv_path], [args.out], started,
    )


def _cmd_eval(args) -> None:
    started = _utc_now()
    records, items, inv_path = _decode_items(args)
    report = evaluate_dataset(items)
    provenance = {
        "checkpoint": str(args.checkpoint),
        "checkpoint_sha256": _sha256(Path(args.checkpoint)),
        "manifest": str(args.manifest),
        "inventory": str(inv_path),
    }
    write_report(report, args.report, provenance=provenance)
    sys.stderr.write(
        f"eval: PER {report.per:.2f} FRR {report.frr:.4f} F1 {report.f1:.4f} over {len(items)} utterances\n"
    )
    _write_run_manifest(
        args.run_manifest or f"{args.report}.run.json",
        "eval", {"batch_size": args.batch_size or 32}, None,
        [args.checkpoint, args.manifest, inv_path], [args.report], started,
    )


def _cmd_ablate(args) -> None:
    started = _utc_now()
    corpus = Path(args.corpus)
    inv = load_inventory(corpus / "inventory.json")
    train_records, feats = _load_split(corpus, "train", inv)
    valid_records, feats_dev = _load_split(corpus, "dev", inv)
    test_records, feats_test = _load_split(corpus, "test", inv)
    feats.update(feats_dev)
    feats.update(feats_test)

    doc = _load_config(args.config) if args.config else {}
    tcfg = _train_config(doc.get("train", {}), args)
    variants = tuple(args.variants.split(",")) if args.variants else ABLATION_VARIANTS
    l1c, l2c = _classes(train_records)
    model_kw = _section_kwargs(
        doc.get("model", {}), ModelConfig,
        reserved={"num_symbols", "d0", "l1_classes", "l2_classes", "conditioning", "phoneme_encoder"},
    )
    aux_kw = _section_kwargs(doc.get("aux", {}), AuxConfig, reserved={"d0", "l1_classes", "l2_classes"})

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    results = run_ablation(
        train_records, valid_records, test_records, feats, inv, l1c, l2c, tcfg,
        model_kw=model_kw or None, aux_kw=aux_kw or None, variants=variants, out_dir=out_dir,
    )

    outputs = []
    for variant in variants:
        entry = results[variant]
        report_path = out_dir / f"{variant}.report.json"
        write_report(entry.report, report_path, provenance={"variant": variant, "seed": tcfg.seed})
        outputs.append(report_path)
    table_path = Path(args.table) if args.table else out_dir / "table.txt"
    _atomic_write_text(table_path, ablation_table(results))
    outputs.append(table_path)
    outputs.extend(sorted(out_dir.glob("*.ck")))
    sys.stderr.write(f"ablate: {len(variants)} variants -> {table_path}\n")
    config = {
        "train": train_config_to_dict(tcfg),
        "variants": list(variants),
        "model": dict(doc.get("model", {})),
        "aux": dict(doc.get("aux", {})),
    }
    inputs = [args.config] if args.config else []
    inputs += [corpus / s for s in ("train.jsonl", "dev.jsonl", "test.jsonl")]
    _write_run_manifest(
        args.run_manifest or out_dir / "run.json",
        "ablate", config, tcfg.seed, inputs, outputs, started,
    )


# ---------------------------------------------------------------------------
# parser


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file; flags override its fields")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int, help="maximum training epochs")
    p.add_argument("--lr", type=float, help="Adam learning rate")
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--patience", type=int, help="early-stopping patience in epochs")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="l1mdd", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-inventory", help="merge per-language symbol lists into one inventory")
    p.add_argument("--langs", help="comma-separated language codes to include")
    p.add_argument("--config", help="JSON file with a 'languages' mapping")
    p.add_argument("--out", required=True)
    p.add_argument("--run-manifest", dest="run_manifest")
    p.set_defaults(func=_cmd_build_inventory)

    p = sub.add_parser("synth", help="synthesize a corpus with planted mispronunciations")
    p.add_argument("--out", required=True, help="corpus directory")
    p.add_argument("--config", help="JSON file overriding generator knobs")
    p.add_argument("--seed", type=int)
    p.add_argument("--train-count", type=int, dest="train_count")
    p.add_argument("--dev-count", type=int, dest="dev_count")
    p.add_argument("--test-count", type=int, dest="test_count")
    p.add_argument("--run-manifest", dest="run_manifest")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("train-aux", help="train the auxiliary language classifier")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="training log (JSON lines); default <out>.log.jsonl")
    _add_train_flags(p)
    p.add_argument("--run-manifest", dest="run_manifest")
    p.set_defaults(func=_cmd_train_aux)

    p = sub.add_parser("train", help="train the recognizer")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="training log (JSON lines); default <out>.log.jsonl")
    p.add_argument("--conditioning", default="none",
                   choices=["none", "onehot-l2", "onehot-l1", "onehot-l1l2", "aux"])
    p.add_argument("--phoneme-encoder", type=_onoff, default=True, dest="phoneme_encoder",
                   metavar="on|off", help="attend over the canonical text (default on)")
    p.add_argument("--aux-checkpoint", dest="aux_checkpoint",
                   help="pretrained language classifier; required for --conditioning aux")
    p.add_argument("--joint", action="store_true",
                   help="update the language classifier together with the recognizer")
    p.add_argument("--alpha", type=float, help="recognition weight in the joint objective")
    p.add_argument("--freeze-conv", type=_onoff, default=None, dest="freeze_conv", metavar="on|off")
    _add_train_flags(p)
    p.add_argument("--run-manifest", dest="run_manifest")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("decode", help="greedy-decode a manifest with a trained recognizer")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True, help="JSONL manifest; features resolve relative to it")
    p.add_argument("--inventory", help="default: inventory.json beside the manifest")
    p.add_argument("--out", required=True, help="JSONL predictions")
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--run-manifest", dest="run_manifest")
    p.set_defaults(func=_cmd_decode)

    p = sub.add_parser("eval", help="decode and score a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--inventory", help="default: inventory.json beside the manifest")
    p.add_argument("--report", required=True, help="metrics report JSON")
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--run-manifest", dest="run_manifest")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("ablate", help="train and score the conditioning ablation battery")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out-dir", required=True, dest="out_dir")
    p.add_argument("--variants", help=f"comma-separated subset of {', '.join(ABLATION_VARIANTS)}")
    p.add_argument("--table", help="summary table path; default <out-dir>/table.txt")
    _add_train_flags(p)
    p.add_argument("--run-manifest", dest="run_manifest")
    p.set_defaults(func=_cmd_ablate)

    return parser


_CATEGORIES = {
    "DimensionError": "dimension",
    "ContractError": "contract",
    "InputError": "input",
    "SymbolLookupError": "symbol",
    "ManifestError": "manifest",
    "ValidationError": "validation",
    "EvaluationError": "evaluation",
}


def _error_line(category: str, exc: BaseException) -> None:
    sys.stderr.write(json.dumps({"error": category, "detail": str(exc)}) + "\n")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except ConfigError as e:
        _error_line("config", e)
        return 3
    except L1mddError as e:
        _error_line(_CATEGORIES.get(type(e).__name__, "runtime"), e)
        return 1
    except Exception as e:  # the one boundary where catching everything is right
        _error_line("internal", e)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
