"""Exception types shared across the package."""


class L1mddError(Exception):
    """Base class for all package errors."""


class DimensionError(L1mddError, ValueError):
    """Operand shapes violate an operation's contract."""


class ContractError(L1mddError, RuntimeError):
    """An API precondition was violated by the caller."""


class ConfigError(L1mddError, ValueError):
    """Invalid or inconsistent configuration."""


class InputError(L1mddError, ValueError):
    """Runtime input outside the supported envelope."""


class SymbolLookupError(L1mddError, KeyError):
    """Phoneme symbol or integer code not present in an inventory."""

    def __str__(self):  # KeyError quotes its message; keep it readable
        return self.args[0] if self.args else ""


class ManifestError(L1mddError, ValueError):
    """Manifest line could not be parsed."""


class ValidationError(L1mddError, ValueError):
    """Record or label failed semantic validation."""


class EvaluationError(L1mddError, RuntimeError):
    """A numeric evaluation produced non-finite results."""
