"""Exception types shared across the package.

Exit-code mapping for the CLI: ValidationError -> 1, EnvironmentFailure -> 2.
"""


class ValidationError(ValueError):
    """Bad input: shape mismatch, out-of-range id, malformed record, bad config."""


class DimensionError(ValidationError):
    """Tensor shapes do not line up for the requested operation."""


class EmptyLossError(ValidationError):
    """A loss was requested over zero unmasked positions."""


class CorruptCheckpointError(ValueError):
    """Checkpoint file failed its magic/version/hash integrity checks."""


class EnvironmentFailure(RuntimeError):
    """The host is missing something we need (tool not found, teacher unreachable)."""
