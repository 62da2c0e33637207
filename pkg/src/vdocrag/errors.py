"""Exception hierarchy shared by every module.

The CLI maps these onto process exit codes: ConfigError -> 2,
DataError -> 3, everything else raised by the library -> 4.
"""


class VDocRagError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(VDocRagError):
    """Invalid or inconsistent configuration (unknown keys, bad types)."""


class DataError(VDocRagError):
    """Malformed or inconsistent input data (manifests, indexes, fixtures)."""


class ManifestError(DataError):
    """Manifest-specific data error; carries the offending line when known."""

    def __init__(self, message: str, line_no: int | None = None):
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)
        self.line_no = line_no


class BackendError(VDocRagError):
    """An answer backend or LLM client failed."""


class NumericError(VDocRagError):
    """Non-finite values or numerically invalid state during computation."""
