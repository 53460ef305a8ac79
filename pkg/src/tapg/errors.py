"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Raised when array dimensions do not line up."""


class ConfigError(ValueError):
    """Invalid configuration values."""


class DataError(ValueError):
    """Input data is missing or inconsistent."""


class FeatureFileError(DataError):
    """Base class for malformed ``.fseq`` / checkpoint files."""


class BadMagic(FeatureFileError):
    pass


class VersionMismatch(FeatureFileError):
    pass


class Truncated(FeatureFileError):
    pass


class NonFiniteValues(FeatureFileError):
    pass
