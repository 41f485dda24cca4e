"""Exception types shared across the toolkit."""


class QbeError(Exception):
    """Base class for all toolkit errors."""


class FormatError(QbeError):
    """A file does not conform to its binary/JSON layout (bad magic, version, truncation)."""


class DataError(QbeError):
    """Payload values are unusable (NaN/Inf, too little audio, non-finite loss)."""


class ValidationError(QbeError):
    """Inputs violate a documented precondition or invariant."""


class ConfigError(QbeError):
    """A configuration object is internally inconsistent."""
