"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, ResourceLimitError -> 3,
bound-check failures -> 1. Everything else is a plain bug.
"""


class MmdflowError(Exception):
    """Base class for all package-specific errors."""


class UsageError(MmdflowError, ValueError):
    """Caller violated an operation's contract (grid mismatch, wrong dim, ...)."""


class ResourceLimitError(MmdflowError, RuntimeError):
    """A configured cap (cell count, eigensolve size, LP size) was exceeded."""


class ConstructionError(MmdflowError, RuntimeError):
    """A constructive operation could not produce a valid object."""


class IntegrationError(MmdflowError, RuntimeError):
    """Time integration went unstable."""


class DomainError(MmdflowError, ValueError):
    """Parameters lie outside the regime a closed-form solution covers."""


class ConfigError(MmdflowError, ValueError):
    """Invalid experiment or CLI configuration; carries the offending field path."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")
