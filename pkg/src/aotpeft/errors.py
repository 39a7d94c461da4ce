"""Exception types shared across the library, each with a stable machine-readable code."""


class AotPeftError(Exception):
    """Base class; `code` is emitted on the CLI diagnostics stream."""

    code = "error"


class ShapeError(AotPeftError):
    """Tensor dimensions do not satisfy an operation's contract."""

    code = "shape"


class ConfigError(AotPeftError):
    """Invalid configuration value (unknown activation, bad factorization, ...)."""

    code = "config"


class InputError(AotPeftError):
    """Out-of-range token id or malformed user input."""

    code = "input"


class NumericError(AotPeftError):
    """NaN/Inf encountered where finite values are required."""

    code = "numeric"


class FormatError(AotPeftError):
    """Corrupt or truncated binary file."""

    code = "format"


class BatchCompositionError(AotPeftError):
    """A multi-task batch mixes structurally incompatible task bundles."""

    code = "batch-composition"
