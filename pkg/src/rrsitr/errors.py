"""Exception taxonomy shared across the package.

CLI exit-code mapping: ConfigError -> 2, FormatError/DataError -> 3,
NumericError -> 4.
"""


class RrsitrError(Exception):
    """Base class for all package errors."""


class ConfigError(RrsitrError):
    """Invalid hyperparameter, shape, or argument combination."""


class FormatError(RrsitrError):
    """Malformed or truncated dataset/checkpoint file."""


class DataError(RrsitrError):
    """Well-formed data that violates a semantic contract (e.g. noisy eval set)."""


class NumericError(RrsitrError):
    """Numeric-domain violation or divergence (zero norms, non-finite loss)."""
