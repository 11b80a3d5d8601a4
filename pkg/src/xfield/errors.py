"""Exception taxonomy shared across the package.

The CLI maps these onto process exit codes: ConfigError -> 1,
DataError (and subclasses) -> 2, NumericalError -> 3.
"""


class ContractError(ValueError):
    """A documented precondition of an operation was violated."""


class ShapeError(ContractError):
    """Operands have incompatible shapes."""


class ConfigError(ValueError):
    """Invalid or unknown configuration content."""


class DataError(ValueError):
    """Input data is unusable (missing, inconsistent, wrong geometry)."""


class FileFormatError(DataError):
    """A serialized file is malformed; message includes byte offsets."""


class NoForegroundError(DataError):
    """A projection contains no attenuated pixels to sample from."""


class NumericalError(FloatingPointError):
    """A forward op, gradient, or training step produced NaN/Inf."""
