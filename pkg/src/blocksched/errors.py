"""Exception types shared across the package."""


class SchedulerError(Exception):
    """Base class for all errors raised by this package."""


class ParameterError(SchedulerError, ValueError):
    """An argument or configuration value violates its documented contract."""


class TraceFormatError(SchedulerError, ValueError):
    """A trace file failed to parse; carries the offending line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class InfeasibleError(SchedulerError, RuntimeError):
    """No valid schedule exists under the given constraints."""


class ConsistencyError(SchedulerError, RuntimeError):
    """Two artifacts that must agree (plan vs. assignment, layouts) do not."""


class InternalError(SchedulerError, RuntimeError):
    """An invariant that should be unconditionally true was violated."""
