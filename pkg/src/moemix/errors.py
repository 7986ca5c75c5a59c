"""Exception taxonomy shared across the package.

The CLI maps these onto process exit codes, so raising the right class
matters: configuration problems must not be reported as data corruption.
"""


class MoeMixError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(MoeMixError):
    """Invalid configuration, flags, or API usage. CLI exit code 2."""


class DataError(MoeMixError):
    """Bad or missing data: corpora, traces, probe sets, files. CLI exit code 3."""


class NumericsError(MoeMixError):
    """Non-finite values encountered during computation. CLI exit code 4."""
