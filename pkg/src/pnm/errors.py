"""
Exception hierarchy for the PNM diagnosis pipeline.

Every error carries the exit code the CLI reports when it escapes a command.
"""

from typing import Optional


class PNMError(Exception):
    """Base class for all pipeline errors."""

    exit_code: int = 1


class InvalidConfig(PNMError, ValueError):
    exit_code = 2


class NoTickets(PNMError, ValueError):
    exit_code = 3


class NoMaintenanceTickets(NoTickets):
    exit_code = 3


class Uncalibrated(PNMError):
    exit_code = 4


class UnknownDevice(PNMError, KeyError):
    exit_code = 5

    def __str__(self) -> str:
        return Exception.__str__(self)


class UnknownTicket(UnknownDevice):
    exit_code = 5


class MalformedRow(PNMError, ValueError):
    """A CSV row (1-based line number, header = line 1) could not be parsed."""

    def __init__(self, line: int, reason: Optional[str] = None):
        self.line = line
        self.reason = reason
        message = f"malformed row at line {line}"
        if reason:
            message += f": {reason}"
        super().__init__(message)


class UnknownChannel(PNMError, ValueError):
    pass


class UnknownKind(PNMError, ValueError):
    pass


class InsufficientData(PNMError, ValueError):
    pass


class LengthMismatch(PNMError, ValueError):
    pass


class EmptySpan(PNMError, ValueError):
    pass


class EmptyWindow(PNMError, ValueError):
    pass


class DeviceSetMismatch(PNMError, ValueError):
    pass
