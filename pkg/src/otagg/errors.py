"""Exception types shared across the package."""


class OtaggError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(OtaggError, ValueError):
    """Invalid configuration field."""


class DimensionError(OtaggError, ValueError):
    """Shapes of the involved arrays do not line up."""


class PreconditionError(OtaggError, ValueError):
    """A documented precondition of an operation was violated."""


class NumericError(OtaggError, ArithmeticError):
    """Non-finite values where finite ones are required."""


class UsageError(OtaggError, RuntimeError):
    """API called in an unsupported way (wrong order, missing state)."""


class ValidationError(OtaggError, ValueError):
    """Data fails a declared invariant (norms, uniqueness, ranges)."""


class DegenerateDescriptorError(ValidationError):
    """Descriptor cannot be normalized because every block is zero."""


class FormatError(OtaggError, ValueError):
    """Malformed file. Carries the byte offset (binary) or line (text)."""

    def __init__(self, message, *, offset=None, line=None):
        loc = ""
        if offset is not None:
            loc = f" (byte offset {offset})"
        elif line is not None:
            loc = f" (line {line})"
        super().__init__(message + loc)
        self.offset = offset
        self.line = line
