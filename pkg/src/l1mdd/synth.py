"""Synthetic L1-conditioned corpus generator.

Mispronunciation has a generative cause here: each (L1, L2) pair carries a
per-phoneme confusion rule (keep / substitute / delete, no insertions), the
annotated sequence is the canonical sequence passed through those rules, and
frames are emitted from the ANNOTATED symbols as
prototype + L1 accent shift + Gaussian noise.

The default setup plants deliberate ambiguity so that conditioning carries
real information:
  - confusable clusters: a shared source symbol sits at a cluster center and
    every language's two substitution targets sit a fixed small radius away,
    so acoustics alone cannot separate cluster members reliably;
  - which target a speaker substitutes depends on their L1;
  - accent coloring: a source symbol this speaker tends to substitute is,
    even when pronounced correctly, realized partway toward the substitute
    (rule coloring), and substituted tokens can land short of the target
    (rule undershoot). The default corpus pairs these so that one L1's deep
    near miss and another L1's undershot substitution produce the same
    sound: a recognizer that does not know the L1 must confuse them, flagging
    correct tokens and missing real errors on that spot;
  - every L1 adds a constant accent shift to all frames, so the same kept
    symbol lands in different places for different L1s;
  - every utterance also adds its own random offset of comparable magnitude,
    so the L1 shift cannot be read off the easy symbols and subtracted.
Language identity is still recoverable: each L2 keeps plain, well-separated
symbols of its own, which is what the auxiliary classifier leans on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import rng as rngmod
from .corpus import UtteranceRecord, write_features, write_manifest
from .errors import ConfigError
from .inventory import PhonemeInventory, build_union

_PROB_TOL = 1e-9


@dataclass
class ConfusionRule:
    keep: float
    delete: float = 0.0
    substitutions: dict[str, float] = field(default_factory=dict)
    # kept tokens are realized this far toward the first substitution target;
    # None defers to the config-wide accent_coloring
    coloring: float | None = None
    # substituted tokens are realized this far back toward the source symbol
    undershoot: float = 0.0

    def validate(self, symbol: str) -> None:
        probs = [self.keep, self.delete, *self.substitutions.values()]
        if any(p < 0 for p in probs):
            raise ConfigError(f"confusion rule for {symbol!r} has a negative probability")
        total = self.keep + self.delete + sum(self.substitutions.values())
        if abs(total - 1.0) > _PROB_TOL:
            raise ConfigError(f"confusion rule for {symbol!r} sums to {total!r}, not 1")
        if self.coloring is not None and not 0.0 <= self.coloring < 1.0:
            raise ConfigError(f"confusion rule for {symbol!r} has coloring {self.coloring!r}, needs [0, 1)")
        if not 0.0 <= self.undershoot < 1.0:
            raise ConfigError(f"confusion rule for {symbol!r} has undershoot {self.undershoot!r}, needs [0, 1)")


_KEEP = ConfusionRule(keep=1.0)


@dataclass
class SynthConfig:
    l2_languages: tuple[str, ...] = ("ar", "en", "zh")
    l1_languages: tuple[str, ...] = ("es", "fr", "hi", "ko")
    symbols_per_language: int = 16
    overlap: float = 0.5  # fraction of each language's symbols drawn from the shared pool
    feature_dim: int = 16
    frames_per_phoneme: tuple[int, int] = (5, 7)
    noise_sigma: float = 0.40
    utterance_phonemes: tuple[int, int] = (4, 7)
    counts: dict[str, int] = field(default_factory=lambda: {"train": 2000, "dev": 360, "test": 720})
    seed: int = 0
    # (l1, l2) -> canonical symbol -> rule; symbols absent from the map are kept
    confusions: dict[tuple[str, str], dict[str, ConfusionRule]] = field(default_factory=dict)
    accent_shifts: dict[str, list[float]] = field(default_factory=dict)
    # each group: [center, member, ...]; members get prototypes on a small
    # sphere around the center's prototype
    prototype_clusters: list[list[str]] = field(default_factory=list)
    cluster_radius: float = 1.0
    prototype_scale: float = 3.0
    # norm of the per-utterance random offset added to every frame
    utterance_jitter_norm: float = 0.5
    # a phoneme the speaker tends to substitute is, even when kept, realized
    # this far toward the substitute (0 = no coloring, must stay < 1)
    accent_coloring: float = 0.35
    # l2 -> symbol -> relative weight when sampling canonical text
    sampling_weights: dict[str, dict[str, float]] = field(default_factory=dict)

    def shared_symbols(self) -> list[str]:
        n_shared = round(self.symbols_per_language * self.overlap)
        return [f"c{j}" for j in range(n_shared)]

    def specific_symbols(self, lang: str) -> list[str]:
        n_specific = self.symbols_per_language - round(self.symbols_per_language * self.overlap)
        return [f"{lang}{j}" for j in range(n_specific)]

    def per_language_symbols(self) -> dict[str, list[str]]:
        shared = self.shared_symbols()
        return {lang: shared + self.specific_symbols(lang) for lang in self.l2_languages}

    def all_symbols(self) -> list[str]:
        seen: list[str] = []
        for syms in self.per_language_symbols().values():
            for s in syms:
                if s not in seen:
                    seen.append(s)
        return sorted(seen)

    def validate(self) -> None:
        if not self.l2_languages or not self.l1_languages:
            raise ConfigError("need at least one L1 and one L2 language")
        if not 0.0 <= self.overlap <= 1.0:
            raise ConfigError(f"overlap must be in [0,1], got {self.overlap}")
        if self.noise_sigma < 0:
            raise ConfigError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.utterance_jitter_norm < 0:
            raise ConfigError(f"utterance_jitter_norm must be >= 0, got {self.utterance_jitter_norm}")
        if not 0.0 <= self.accent_coloring < 1.0:
            raise ConfigError(f"accent_coloring must be in [0, 1), got {self.accent_coloring}")
        if self.feature_dim < 1:
            raise ConfigError(f"feature_dim must be >= 1, got {self.feature_dim}")
        lo, hi = self.frames_per_phoneme
        if not 1 <= lo <= hi:
            raise ConfigError(f"bad frames_per_phoneme range {self.frames_per_phoneme}")
        lo, hi = self.utterance_phonemes
        if not 1 <= lo <= hi:
            raise ConfigError(f"bad utterance_phonemes range {self.utterance_phonemes}")
        for split, n in self.counts.items():
            if n < 1:
                raise ConfigError(f"split {split!r} count must be >= 1, got {n}")
        known = set(self.all_symbols())
        for (l1, l2), rules in self.confusions.items():
            if l2 not in self.l2_languages or l1 not in self.l1_languages:
                raise ConfigError(f"confusion entry for unknown pair ({l1!r}, {l2!r})")
            for sym, rule in rules.items():
                if sym not in known:
                    raise ConfigError(f"confusion rule for unknown phoneme {sym!r}")
                for target in rule.substitutions:
                    if target not in known:
                        raise ConfigError(f"confusion target is an unknown phoneme {target!r}")
                rule.validate(sym)
        for l1, vec in self.accent_shifts.items():
            if l1 not in self.l1_languages:
                raise ConfigError(f"accent shift for unknown L1 {l1!r}")
            if len(vec) != self.feature_dim:
                raise ConfigError(f"accent shift for {l1!r} has length {len(vec)}, expected {self.feature_dim}")
        for group in self.prototype_clusters:
            if len(group) < 2:
                raise ConfigError("prototype cluster needs a center and at least one member")
            for sym in group:
                if sym not in known:
                    raise ConfigError(f"prototype cluster names unknown phoneme {sym!r}")
        for l2, weights in self.sampling_weights.items():
            if l2 not in self.l2_languages:
                raise ConfigError(f"sampling weights for unknown L2 {l2!r}")
            for sym, w in weights.items():
                if sym not in known or w < 0:
                    raise ConfigError(f"bad sampling weight {sym!r}: {w}")


def build_inventory(cfg: SynthConfig) -> PhonemeInventory:
    return build_union(cfg.per_language_symbols())


def default_synth_config(seed: int = 0, train_count: int = 2000, dev_count: int = 360, test_count: int = 720) -> SynthConfig:
    """The standard corpus: 3 L2s, 4 L1s, 32-symbol union, planted ambiguity."""
    cfg = SynthConfig(seed=seed, counts={"train": train_count, "dev": dev_count, "test": test_count})
    n_clusters = 2
    shared = cfg.shared_symbols()
    sources = shared[:n_clusters]

    # cluster k: shared source c_k at the center, targets lang{2k} and
    # lang{2k+1} for every language on the surrounding sphere
    for k, src in enumerate(sources):
        group = [src]
        for lang in cfg.l2_languages:
            spec = cfg.specific_symbols(lang)
            group += [spec[2 * k], spec[2 * k + 1]]
        cfg.prototype_clusters.append(group)

    # L1s pair off per target lane: on one cluster the first of a pair keeps
    # the source but colors it deep toward the target (a near miss) while its
    # partner substitutes with an undershoot that lands on the same spot;
    # roles swap on the other cluster. The two realizations coincide
    # acoustically, so only the speaker's L1 says which symbol was meant.
    near_miss = dict(keep=0.35, delete=0.05, coloring=0.55, undershoot=0.0)
    undershot = dict(keep=0.52, delete=0.03, coloring=0.0, undershoot=0.45)
    # l1 -> (target lane, cluster on which it plays the near-miss role)
    roles = {
        cfg.l1_languages[0]: (0, 0),
        cfg.l1_languages[2]: (0, 1),
        cfg.l1_languages[1]: (1, 0),
        cfg.l1_languages[3]: (1, 1),
    }
    for l2 in cfg.l2_languages:
        spec = cfg.specific_symbols(l2)
        for l1 in cfg.l1_languages:
            lane, miss_cluster = roles[l1]
            rules: dict[str, ConfusionRule] = {}
            for k, src in enumerate(sources):
                kw = near_miss if k == miss_cluster else undershot
                sub = 1.0 - kw["keep"] - kw["delete"]
                rules[src] = ConfusionRule(substitutions={spec[2 * k + lane]: sub}, **kw)
            for sym in shared[n_clusters:] + spec:
                rules[sym] = ConfusionRule(keep=0.97, delete=0.03)
            cfg.confusions[(l1, l2)] = rules

    # accent shifts: fixed-norm random directions, one per L1
    g = rngmod.stream(seed, "synth/accent-shifts")
    for l1 in cfg.l1_languages:
        v = g.normal(size=cfg.feature_dim)
        cfg.accent_shifts[l1] = list(v / np.linalg.norm(v) * 0.55)

    # upweight cluster symbols so ambiguity actually occurs in the text
    for l2 in cfg.l2_languages:
        spec = cfg.specific_symbols(l2)
        weights = {sym: 1.0 for sym in shared + spec}
        for k in range(n_clusters):
            weights[sources[k]] = 2.0
            weights[spec[2 * k]] = 1.2
            weights[spec[2 * k + 1]] = 1.2
        cfg.sampling_weights[l2] = weights

    cfg.validate()
    return cfg


def build_prototypes(cfg: SynthConfig) -> dict[str, np.ndarray]:
    """Deterministic symbol prototypes; cluster members orbit their center."""
    g = rngmod.stream(cfg.seed, "synth/prototypes")
    protos = {sym: cfg.prototype_scale * g.normal(size=cfg.feature_dim) for sym in cfg.all_symbols()}
    for gi, group in enumerate(cfg.prototype_clusters):
        center = protos[group[0]]
        gg = rngmod.stream(cfg.seed, f"synth/cluster/{gi}")
        for member in group[1:]:
            d = gg.normal(size=cfg.feature_dim)
            protos[member] = center + cfg.cluster_radius * d / np.linalg.norm(d)
    return protos


def apply_confusion_aligned(
    canonical: list[str], l1: str, l2: str, cfg: SynthConfig, gen: np.random.Generator
) -> list[tuple[str, str]]:
    """One keep/substitute/delete draw per canonical symbol, in order.

    Returns (source, realized) pairs; deleted symbols produce no pair.
    """
    rules = cfg.confusions.get((l1, l2), {})
    out: list[tuple[str, str]] = []
    for sym in canonical:
        rule = rules.get(sym, _KEEP)
        u = gen.uniform()
        if u < rule.keep:
            out.append((sym, sym))
        elif u < rule.keep + rule.delete:
            continue
        else:
            edge = rule.keep + rule.delete
            for target, p in rule.substitutions.items():
                edge += p
                if u < edge:
                    out.append((sym, target))
                    break
            else:
                out.append((sym, sym))  # guard against float edge rounding
    if not out:
        out.append((canonical[0], canonical[0]))  # annotated must stay nonempty
    return out


def apply_confusion(canonical: list[str], l1: str, l2: str, cfg: SynthConfig, gen: np.random.Generator) -> list[str]:
    """Realized symbol sequence only; see apply_confusion_aligned."""
    return [realized for _, realized in apply_confusion_aligned(canonical, l1, l2, cfg, gen)]


def _sample_canonical(cfg: SynthConfig, l2: str, gen: np.random.Generator) -> list[str]:
    pool = cfg.per_language_symbols()[l2]
    weights = cfg.sampling_weights.get(l2)
    if weights:
        w = np.array([weights.get(s, 1.0) for s in pool])
        p = w / w.sum()
    else:
        p = None
    lo, hi = cfg.utterance_phonemes
    n = int(gen.integers(lo, hi + 1))
    seq: list[str] = []
    while len(seq) < n:
        sym = pool[int(gen.choice(len(pool), p=p))]
        if seq and sym == seq[-1]:
            continue  # no immediate repeats; keeps CTC frame demand at the length itself
        seq.append(sym)
    return seq


@dataclass
class SynthResult:
    records: dict[str, list[UtteranceRecord]]
    features: dict[str, np.ndarray]
    manifest_paths: dict[str, Path]
    inventory: PhonemeInventory
    out_dir: Path


def synthesize_corpus(cfg: SynthConfig, out_dir: str | Path) -> SynthResult:
    cfg.validate()
    inv = build_inventory(cfg)
    protos = build_prototypes(cfg)
    shifts = {l1: np.asarray(v) for l1, v in cfg.accent_shifts.items()}
    zero_shift = np.zeros(cfg.feature_dim)
    out_dir = Path(out_dir)
    fmin, fmax = cfg.frames_per_phoneme

    records: dict[str, list[UtteranceRecord]] = {}
    feats: dict[str, np.ndarray] = {}
    manifest_paths: dict[str, Path] = {}
    for split in sorted(cfg.counts):
        feat_dir = out_dir / "features" / split
        feat_dir.mkdir(parents=True, exist_ok=True)
        split_records = []
        for i in range(cfg.counts[split]):
            g = rngmod.stream(cfg.seed, f"synth/{split}/{i:06d}")
            l2 = cfg.l2_languages[i % len(cfg.l2_languages)]
            l1 = cfg.l1_languages[(i // len(cfg.l2_languages)) % len(cfg.l1_languages)]
            canonical = _sample_canonical(cfg, l2, g)
            aligned = apply_confusion_aligned(canonical, l1, l2, cfg, g)
            annotated = [realized for _, realized in aligned]
            frames = []
            shift = shifts.get(l1, zero_shift)
            rules = cfg.confusions.get((l1, l2), {})
            if cfg.utterance_jitter_norm > 0:
                d = g.normal(size=cfg.feature_dim)
                jitter = cfg.utterance_jitter_norm * d / np.linalg.norm(d)
            else:
                jitter = zero_shift
            for src, sym in aligned:
                n = int(g.integers(fmin, fmax + 1))
                p = protos[sym]
                rule = rules.get(src)
                if rule is not None and rule.substitutions:
                    if sym == src:
                        alpha = cfg.accent_coloring if rule.coloring is None else rule.coloring
                        if alpha > 0:
                            toward = protos[next(iter(rule.substitutions))]
                            p = p + alpha * (toward - p)
                    elif rule.undershoot > 0 and sym in rule.substitutions:
                        p = p + rule.undershoot * (protos[src] - p)
                base = p + shift + jitter
                frames.append(base + cfg.noise_sigma * g.normal(size=(n, cfg.feature_dim)))
            matrix = np.concatenate(frames, axis=0)
            utt_id = f"{split}-{i:06d}"
            rel = Path("features") / split / f"{utt_id}.l1md"
            write_features(matrix, out_dir / rel)
            feats[utt_id] = matrix.astype("<f4").astype(np.float64)  # as a reader would see it
            split_records.append(
                UtteranceRecord(
                    utt_id=utt_id,
                    features=str(rel),
                    canonical=canonical,
                    annotated=annotated,
                    l1=l1,
                    l2=l2,
                )
            )
        manifest_paths[split] = out_dir / f"{split}.jsonl"
        write_manifest(split_records, manifest_paths[split])
        records[split] = split_records

    from .inventory import save_inventory

    save_inventory(inv, out_dir / "inventory.json")
    return SynthResult(records=records, features=feats, manifest_paths=manifest_paths, inventory=inv, out_dir=out_dir)
