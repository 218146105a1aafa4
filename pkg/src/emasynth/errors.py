"""Exception types shared across the pipeline.

Every failure mode named by a pipeline contract maps to one of these, so
callers (and the CLI exit-code logic) can distinguish bad input, a missing
upstream artifact, and a genuine runtime fault.
"""


class EmasynthError(Exception):
    """Base class for all package errors."""


class ConfigError(EmasynthError):
    """Invalid configuration value or unusable run config."""


class ParseError(EmasynthError):
    """Malformed input file.  Carries the offending location when known."""

    def __init__(self, message, *, line=None, source=None):
        loc = []
        if source is not None:
            loc.append(str(source))
        if line is not None:
            loc.append(f"line {line}")
        if loc:
            message = f"{message} ({', '.join(loc)})"
        super().__init__(message)
        self.line = line
        self.source = source


class FormatError(EmasynthError):
    """Unsupported file format (e.g. compressed or float WAV)."""


class RateError(EmasynthError):
    """Sample-rate precondition violated."""


class AlignmentError(EmasynthError):
    """Paired sequences disagree in length beyond what the caller allows."""


class PartitionError(EmasynthError):
    """Manifest cannot be partitioned into the requested train/test setup."""


class HeadCorrectionError(EmasynthError):
    """Reference-sensor configuration unusable for rigid alignment."""


class DomainError(EmasynthError):
    """Numeric argument outside the mathematical domain of an operation."""


class DegenerateDataError(EmasynthError):
    """Data carry no usable variation (e.g. all-zero differences)."""


class DependencyError(EmasynthError):
    """A pipeline stage ran before its upstream artifact exists/matches."""


class IntegrityError(EmasynthError):
    """Stored records reference unknown entities or conflict with the log."""
