"""
Exception hierarchy for ICL Forge.
Every error carries the process exit code the CLI maps it to.
"""
from typing import Iterable, Optional


class IclForgeError(Exception):
    """Base class for all ICL Forge errors."""
    exit_code: int = 1


class ConfigError(IclForgeError, ValueError):
    """Invalid or unknown configuration."""
    exit_code = 2


class ParameterError(IclForgeError, ValueError):
    """Invalid call parameters (window sizes, n-gram lengths, ...)."""
    exit_code = 2


class LabelRangeError(IclForgeError, ValueError):
    """A label id falls outside the label vocabulary."""
    exit_code = 2


class DimensionError(IclForgeError, ValueError):
    """Tensor shapes do not agree."""
    exit_code = 2


class NumericError(IclForgeError, ArithmeticError):
    """NaN or Inf where finite values are required."""
    exit_code = 4


class FormatError(IclForgeError, ValueError):
    """Malformed binary or text file."""
    exit_code = 3

    def __init__(self, message: str, offset: Optional[int] = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class SpecError(IclForgeError, ValueError):
    """Invalid synthetic dataset specification."""
    exit_code = 2


class SplitError(IclForgeError, ValueError):
    """A store cannot be split as requested."""
    exit_code = 2


class RecipeError(IclForgeError, ValueError):
    """An episode cannot be built with the given recipe and store."""
    exit_code = 2


class EvalError(IclForgeError, ValueError):
    """Evaluation suite is malformed or cannot be built."""
    exit_code = 2


class SeriesError(IclForgeError, ValueError):
    """Checkpoints in a series do not share a configuration."""
    exit_code = 2


class AggregationError(IclForgeError, ValueError):
    """Metric logs cannot be aligned for aggregation."""
    exit_code = 2

    def __init__(self, message: str, seeds: Iterable[int] = ()):
        self.seeds = sorted(seeds)
        if self.seeds:
            message = f"{message}; offending seeds: {self.seeds}"
        super().__init__(message)


class HashMismatchError(IclForgeError):
    """A suite or store does not match the run manifest."""
    exit_code = 5


class SweepError(IclForgeError):
    """One or more sweep children failed."""
    exit_code = 6
