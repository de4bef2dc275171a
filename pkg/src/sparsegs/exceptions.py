"""Error types shared across the package.

Every error carries a short machine-readable ``code`` so the CLI can emit
structured JSON on stderr without string-matching exception text.
"""


class SparseGSError(Exception):
    """Base class for all package errors."""

    code = "error"

    def __init__(self, message, **details):
        super().__init__(message)
        self.details = details

    def to_json(self):
        return {"code": self.code, "message": str(self), **self.details}


# --- scene / math ---------------------------------------------------------

class DegenerateRotationError(SparseGSError):
    code = "degenerate_rotation"


class NumericalDegeneracyError(SparseGSError):
    code = "numerical_degeneracy"


class ValidationError(SparseGSError):
    code = "validation"


# --- rendering ------------------------------------------------------------

class RenderError(SparseGSError):
    code = "render"


class MissingIntermediatesError(SparseGSError):
    code = "missing_intermediates"


# --- priors / providers ---------------------------------------------------

class ProviderError(SparseGSError):
    code = "provider"


class ProviderTimeoutError(ProviderError):
    code = "provider_timeout"


class MalformedFrameError(ProviderError):
    code = "malformed_frame"


class MissingPriorFileError(ProviderError):
    code = "missing_prior_file"


class DegenerateStatisticsError(SparseGSError):
    code = "degenerate_statistics"


# --- data I/O -------------------------------------------------------------

class DataError(SparseGSError):
    code = "data"


class MissingFileError(DataError):
    code = "missing_file"


class VersionMismatchError(DataError):
    code = "version_mismatch"


class ResolutionMismatchError(DataError):
    code = "resolution_mismatch"


class ManifestError(DataError):
    code = "manifest"


class CLIUsageError(SparseGSError):
    code = "usage"
