"""
Exception hierarchy shared by every app.

All errors raised on purpose by the policy, simulator, protocol and config
layers derive from FasterError so callers (the management command, the DRF
exception handler) can map them to exit codes and error envelopes.
"""


class FasterError(Exception):
    """Base class for all expected failures."""

    default_message = "An error occurred"

    def __init__(self, message=None, details=None):
        self.message = message or self.default_message
        self.details = details
        super().__init__(self.message)


class DomainError(FasterError):
    """A value is outside the domain an operation accepts (e.g. d >= H)."""

    default_message = "Argument outside of the valid domain"


class ShapeError(DomainError):
    """Array shapes or declared dimensions do not agree."""

    default_message = "Dimension mismatch"


class InfeasibleError(FasterError):
    """No execution horizon / timing combination keeps the controller fed."""

    default_message = "Configuration is infeasible"


class TraceError(FasterError):
    """A run trace does not contain what a measurement needs."""

    default_message = "Trace does not cover the requested event"


class ProtocolError(FasterError):
    """Malformed, truncated or out-of-order wire traffic."""

    default_message = "Protocol error"


class ConfigError(FasterError):
    """
    Config validation failure.

    Carries the dotted key path of the offending entry and, when the config
    came from a file, the 1-based line where that key appears.
    """

    default_message = "Invalid configuration"

    def __init__(self, message=None, details=None, path=None, line=None):
        self.path = path
        self.line = line
        super().__init__(message, details)

    def __str__(self):
        location = ""
        if self.line is not None:
            location = f"line {self.line}: "
        if self.path:
            location += f"{self.path}: "
        return f"{location}{self.message}"
