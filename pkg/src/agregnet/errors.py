"""Exception types shared across the toolkit.

All of these subclass ValueError so callers that only care about
"bad input" can catch one base class; I/O problems stay on OSError.
"""


class SchemaError(ValueError):
    """An annotation or config file does not match the on-disk schema."""


class ValidationError(ValueError):
    """Parsed data violates a documented invariant (bounds, label set, ...)."""


class ConfigError(ValueError):
    """A configuration object is internally inconsistent."""


class GenerationError(RuntimeError):
    """Synthetic scene generation could not satisfy placement constraints."""


class TrainingDivergedError(RuntimeError):
    """Training hit a non-finite loss; message carries epoch/batch diagnostics."""
