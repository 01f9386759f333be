"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: configuration problems exit 1,
data/format problems exit 2, numeric failures exit 3.
"""


class PedattrError(Exception):
    """Base class for all package errors."""


class ConfigError(PedattrError):
    """Invalid configuration, spec file, or CLI usage."""


class ShapeError(PedattrError):
    """Tensor dimension mismatch; message names both offending shapes."""


class InputError(PedattrError):
    """Invalid runtime input (empty text, out-of-range token id, bad label)."""


class DataFormatError(PedattrError):
    """Malformed container, annotation, or vocab file."""


class CacheInvalidError(DataFormatError):
    """Embedding cache incompatible with the active model configuration."""


class NumericError(PedattrError):
    """Non-finite value or degenerate numeric input encountered."""
