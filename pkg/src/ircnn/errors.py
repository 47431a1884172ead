"""Exception hierarchy shared by every module.

Each class carries a short machine-parseable ``category`` used by the CLI
when reporting failures (one line, nonzero exit).
"""


class IrcnnError(Exception):
    """Base class for all errors raised by this package."""

    category = "internal"


class ConfigError(IrcnnError):
    """Invalid configuration: bad shapes, widths, flags, hyperparameters."""

    category = "config"


class DataError(IrcnnError):
    """Invalid data: bad labels, malformed or truncated dataset files."""

    category = "data"


class NumericsError(IrcnnError):
    """Numeric contract violation: NaN/Inf in a kernel output, gradient or loss."""

    category = "numerics"


class InitializationError(IrcnnError):
    """Weight initialization failure (e.g. a dead layer during LSUV)."""

    category = "init"
