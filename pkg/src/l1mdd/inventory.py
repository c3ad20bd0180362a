"""Unified multilingual phoneme set and its integer coding.

The union inventory merges per-language symbol lists, keeping language
provenance per symbol. Symbols are ordered lexicographically so the coding
is deterministic across machines. The CTC blank is an extra class outside
the symbol list: blank_id == len(symbols), and the output head downstream
has len(symbols)+1 logits.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError, SymbolLookupError

FORMAT_VERSION = 1


@dataclass(frozen=True)
class PhonemeSymbol:
    symbol: str
    languages: frozenset[str]

    def __post_init__(self):
        if not self.symbol or any(c.isspace() for c in self.symbol):
            raise ConfigError(f"bad phoneme symbol {self.symbol!r}: must be nonempty, no whitespace")
        if not self.languages:
            raise ConfigError(f"phoneme symbol {self.symbol!r} has no languages")


@dataclass
class PhonemeInventory:
    languages: tuple[str, ...]
    symbols: tuple[PhonemeSymbol, ...]
    _code: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        names = [s.symbol for s in self.symbols]
        if names != sorted(names):
            raise ConfigError("inventory symbols must be in lexicographic order")
        if len(set(names)) != len(names):
            raise ConfigError("inventory contains duplicate symbols")
        for s in self.symbols:
            extra = s.languages - set(self.languages)
            if extra:
                raise ConfigError(f"symbol {s.symbol!r} tagged with unknown languages {sorted(extra)}")
        self._code = {s.symbol: i for i, s in enumerate(self.symbols)}

    def __len__(self):
        return len(self.symbols)

    @property
    def blank_id(self) -> int:
        return len(self.symbols)

    @property
    def num_classes(self) -> int:
        """Output head width: every symbol plus the blank."""
        return len(self.symbols) + 1

    def __contains__(self, symbol: str) -> bool:
        return symbol in self._code

    def code_of(self, symbol: str) -> int:
        try:
            return self._code[symbol]
        except KeyError:
            raise SymbolLookupError(f"unknown phoneme symbol {symbol!r}") from None

    def symbol_of(self, code: int) -> str:
        if not 0 <= code < len(self.symbols):
            raise SymbolLookupError(f"phoneme code {code} out of range [0, {len(self.symbols)})")
        return self.symbols[code].symbol

    def sub_inventory(self, language: str) -> "PhonemeInventory":
        """Single-language inventory (the monolingual baselines use these)."""
        if language not in self.languages:
            raise ConfigError(f"unknown language {language!r}; have {list(self.languages)}")
        subset = tuple(
            PhonemeSymbol(s.symbol, frozenset([language])) for s in self.symbols if language in s.languages
        )
        if not subset:
            raise ConfigError(f"no symbols for language {language!r}")
        return PhonemeInventory(languages=(language,), symbols=subset)


def build_union(per_language: dict[str, list[str]]) -> PhonemeInventory:
    """Merge per-language symbol lists into one inventory with provenance."""
    if not per_language:
        raise ConfigError("no languages given")
    for lang, syms in per_language.items():
        if not syms:
            raise ConfigError(f"language {lang!r} has an empty symbol list")
    provenance: dict[str, set[str]] = {}
    for lang in sorted(per_language):
        for sym in per_language[lang]:
            provenance.setdefault(sym, set()).add(lang)
    symbols = tuple(PhonemeSymbol(sym, frozenset(provenance[sym])) for sym in sorted(provenance))
    return PhonemeInventory(languages=tuple(sorted(per_language)), symbols=symbols)


def encode(seq: list[str], inv: PhonemeInventory) -> list[int]:
    out = []
    for i, sym in enumerate(seq):
        if sym not in inv:
            raise SymbolLookupError(f"unknown phoneme symbol {sym!r} at position {i}")
        out.append(inv.code_of(sym))
    return out


def decode(ids: list[int], inv: PhonemeInventory) -> list[str]:
    out = []
    for i, code in enumerate(ids):
        if code == inv.blank_id:
            raise SymbolLookupError(f"blank id {code} at position {i}: decode operates on collapsed sequences")
        if not 0 <= code < len(inv):
            raise SymbolLookupError(f"phoneme code {code} at position {i} out of range [0, {len(inv)})")
        out.append(inv.symbol_of(code))
    return out


def to_json_dict(inv: PhonemeInventory) -> dict:
    return {
        "languages": list(inv.languages),
        "symbols": [{"symbol": s.symbol, "languages": sorted(s.languages)} for s in inv.symbols],
        "version": FORMAT_VERSION,
    }


def from_json_dict(obj: dict) -> PhonemeInventory:
    if not isinstance(obj, dict):
        raise ConfigError("inventory file must hold a JSON object")
    version = obj.get("version")
    if version != FORMAT_VERSION:
        raise ConfigError(f"unsupported inventory version {version!r}; expected {FORMAT_VERSION}")
    try:
        languages = tuple(obj["languages"])
        symbols = tuple(
            PhonemeSymbol(e["symbol"], frozenset(e["languages"])) for e in obj["symbols"]
        )
    except (KeyError, TypeError) as e:
        raise ConfigError(f"malformed inventory object: {e}") from None
    return PhonemeInventory(languages=languages, symbols=symbols)


def save_inventory(inv: PhonemeInventory, path: str | Path) -> None:
    Path(path).write_text(json.dumps(to_json_dict(inv), sort_keys=True, indent=1) + "\n", encoding="utf-8")


def load_inventory(path: str | Path) -> PhonemeInventory:
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"inventory file {path} is not valid JSON: {e}") from None
    return from_json_dict(obj)
