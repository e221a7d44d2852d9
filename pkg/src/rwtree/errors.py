"""Exception hierarchy shared by every module.

Each class carries a short ``tag`` that the CLI writes to stderr and maps
to an exit code.
"""


class RwtreeError(Exception):
    tag = "error"


class DomainError(RwtreeError, ValueError):
    """Argument outside the domain where a quantity is defined."""

    tag = "domain"


class NoRoot(RwtreeError):
    """Root search found no sign change on the search interval."""

    tag = "no-root"


class CalibrationError(RwtreeError):
    tag = "calibration"


class CapacityExceeded(RwtreeError):
    """Realizing more nodes would breach the tree's node cap."""

    tag = "capacity"


class StepBudgetExceeded(RwtreeError):
    """The walk used up its step budget before finishing."""

    tag = "step-budget"


class EmptyCandidates(RwtreeError):
    """No candidate level has a non-empty heavy range."""

    tag = "empty-candidates"


class ConfigError(RwtreeError):
    tag = "config"

    def __init__(self, message, *, line=None, field=None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field '{field}'")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.line = line
        self.field = field
