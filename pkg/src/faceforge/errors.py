"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ContractError(ValueError):
    """A call violated an API precondition (not a shape problem)."""


class FileFormatError(ValueError):
    """Base class for binary file parsing failures."""


class BadMagicError(FileFormatError):
    """File does not start with the expected magic bytes."""


class TruncatedFileError(FileFormatError):
    """File ended before the declared payload was read."""


class ValidationError(ValueError):
    """Parsed data violates a semantic invariant (indices, ranges, ...)."""


class ManifestError(ValueError):
    """A dataset manifest file is malformed."""


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


class TrainingDiverged(RuntimeError):
    """Training aborted after a non-finite loss; a diagnostic checkpoint was written."""
