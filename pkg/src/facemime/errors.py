"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
DivergenceError -> 4, anything else -> 1.
"""


class FacemimeError(Exception):
    """Base class for all package errors."""


class ConfigError(FacemimeError):
    """Invalid, unknown, or inconsistent configuration."""


class ShapeError(FacemimeError):
    """A tensor does not have the shape a contract demands."""


class DataError(FacemimeError):
    """Dataset, file, or container problems."""


class ModelHealthError(FacemimeError):
    """Non-finite activations or other signs of a broken model."""


class DivergenceError(FacemimeError):
    """Training or adaptation diverged numerically."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
