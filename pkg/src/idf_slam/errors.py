"""Shared exception types."""


class ContractViolation(ValueError):
    """An operation was called with inputs that break its preconditions."""


class TrackerLost(RuntimeError):
    """The front-end could not produce a usable pose estimate."""


class DatasetError(RuntimeError):
    """A dataset directory is missing files or contains inconsistent data."""


class MetricError(RuntimeError):
    """An evaluation metric received degenerate input."""
