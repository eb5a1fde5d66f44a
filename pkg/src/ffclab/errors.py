"""Exception hierarchy shared across the package."""


class FFCLabError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(FFCLabError, ValueError):
    """An argument violates a documented precondition."""


class DegenerateGroupError(FFCLabError):
    """A fairness metric was asked to average over an empty group or cell."""


class PartitionInfeasibleError(FFCLabError):
    """The requested client partition cannot be satisfied."""


class NumericFailureError(FFCLabError):
    """A loss or gradient went non-finite; carries the offending term name."""

    def __init__(self, term: str, message: str = ""):
        self.term = term
        super().__init__(f"non-finite value in {term}" + (f": {message}" if message else ""))


class IdentificationAmbiguousError(FFCLabError):
    """Adjustment-set selection needs a fully directed graph or an explicit set."""


class UnsupportedStratumError(FFCLabError):
    """No stratum has data for both treatment arms (or the stratum is empty)."""


class SchemaError(FFCLabError):
    """Malformed data file (CSV header, value domain, ragged row)."""


class ConfigError(FFCLabError):
    """Malformed or inconsistent experiment configuration."""
