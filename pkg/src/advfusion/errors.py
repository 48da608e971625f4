"""Exception hierarchy shared by every module."""


class AdvFusionError(Exception):
    """Base class for all package errors."""


class DimensionError(AdvFusionError, ValueError):
    """Incompatible tensor or parameter shapes."""


class DataError(AdvFusionError, ValueError):
    """Malformed or missing input data."""


class ConfigError(AdvFusionError, ValueError):
    """Invalid configuration value."""


class UsageError(AdvFusionError, RuntimeError):
    """API called in a state or with arguments it does not support."""


class NumericError(AdvFusionError, ArithmeticError):
    """Non-finite loss or gradient."""


class IntegrityError(AdvFusionError, IOError):
    """Checkpoint bytes do not match their manifest."""


class VersionError(AdvFusionError, IOError):
    """Checkpoint written by an unsupported format version."""


class MissingGroupError(AdvFusionError, LookupError):
    """Requested parameter group is absent from a checkpoint."""
