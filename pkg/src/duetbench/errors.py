"""Exception hierarchy. Each class carries the process exit code the CLI uses."""


class DuetError(Exception):
    exit_code = 1


class ConfigError(DuetError, ValueError):
    exit_code = 2


class CapabilityError(DuetError):
    """The host lacks a facility an isolation backend needs."""

    exit_code = 3


class IsolationError(DuetError):
    exit_code = 4


class HealthTimeout(DuetError):
    exit_code = 5


class DriverError(DuetError):
    exit_code = 6


class InsufficientDataError(DuetError, ValueError):
    exit_code = 7
