"""Exception hierarchy shared across the package."""


class CtdcError(Exception):
    """Base class for all errors raised by this package."""


class TaskFileError(CtdcError):
    """A task definition file is malformed or internally inconsistent."""


class InvalidRecordError(CtdcError):
    """A process record violates the owning task's transition structure."""


class SchemaError(CtdcError):
    """A config, parameter, or data file does not match its schema."""


class EstimationError(CtdcError):
    """Numerical failure during fitting (underflow, broken monotonicity, ...)."""
