"""Exception types shared across the package."""


class SafeShieldError(Exception):
    """Base class for all package errors."""


class InfeasibleState(SafeShieldError):
    """An externally supplied joint state admits no feasible continuation."""


class SamplingExhausted(SafeShieldError):
    """Rejection sampling hit the configured attempt cap."""


class MissingNetwork(SafeShieldError):
    """A risk mode requires a network that was not supplied."""


class IncompleteTrace(SafeShieldError):
    """Failure classification needs snapshots that were not retained."""


class WeightFileError(SafeShieldError):
    """Malformed, truncated or corrupted weight file."""


class DatasetError(SafeShieldError):
    """Malformed risk dataset file or degenerate dataset contents."""


class ConfigError(SafeShieldError):
    """Experiment config file could not be parsed or validated."""
