"""Exception types shared across the package."""


class ReeflError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(ReeflError):
    """Operands have incompatible shapes."""


class NonFiniteError(ReeflError):
    """An operation produced NaN or Inf."""


class ConfigError(ReeflError):
    """Invalid or inconsistent configuration."""


class BudgetError(ReeflError):
    """Client budget outside the valid block range."""


class ScheduleError(ReeflError):
    """Exit schedule violated (queue overflow, bad round index, ...)."""


class StateError(ReeflError):
    """Stateful object used before initialization or with stale shape."""


class TraceError(ReeflError):
    """Forward trace is missing data required by a downstream op."""


class AggregationError(ReeflError):
    """Client updates inconsistent with their declared budgets or shapes."""


class PartitionError(ReeflError):
    """Data partition constraints cannot be satisfied."""


class SplitError(ReeflError):
    """Train/test split constraints cannot be satisfied."""


class FormatError(ReeflError):
    """On-disk record is malformed; message carries the byte offset."""


class InputError(ReeflError):
    """Caller-supplied runtime input is invalid (empty batch, bad sample id)."""


class DivergenceError(ReeflError):
    """Training produced a non-finite loss; message names the batch."""
