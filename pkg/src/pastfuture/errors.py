"""Error taxonomy shared across the package.

Five failure categories, each with a dedicated exception so callers (and the
CLI exit-code mapping) can tell them apart:

- DimensionError: shapes that cannot combine.
- ContractError: an API precondition was violated (wrong call order,
  consumed tape, empty loss, malformed prefix, ...).
- NumericalAbort: NaN or divergence detected mid-computation.
- IntegrityError: a checkpoint or serialized artifact fails validation.
- ConfigError: an unusable configuration or task specification.

IndexError from the standard library is reused for out-of-range ids.
"""


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ContractError(RuntimeError):
    """An operation was invoked in a state its contract forbids."""


class NumericalAbort(RuntimeError):
    """A NaN or non-finite value surfaced where it must not."""


class IntegrityError(RuntimeError):
    """Serialized state is corrupt, truncated, or of an unknown version."""


class ConfigError(ValueError):
    """A configuration value or combination is invalid."""
