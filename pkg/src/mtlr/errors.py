"""Exception types shared across the package.

Every error raised on bad user input derives from :class:`MtlrError` so
callers can catch one base class at the CLI boundary.
"""


class MtlrError(Exception):
    """Base class for all package errors."""


class DimensionMismatch(MtlrError):
    """Design row count and response length disagree."""


class InconsistentD(MtlrError):
    """Tasks in a multi-task dataset disagree on the feature dimension."""


class NonBinaryLabel(MtlrError):
    """A logistic-kind dataset contains a response outside {0, 1}."""


class NonFiniteEntry(MtlrError):
    """A design or response entry is NaN or infinite."""


class ConfigError(MtlrError):
    """Inconsistent experiment configuration fields."""


class ConfigParseError(ConfigError):
    """A config file line or flag could not be parsed."""


class UnknownKey(ConfigError):
    """A config file contains a key the schema does not define."""


class TooFewSamples(MtlrError):
    """A task has fewer samples than the requested fold count."""


class RowCountMismatch(MtlrError):
    """Input files disagree on the number of rows."""


class UnknownSubjectId(MtlrError):
    """A subject-id column entry is not a positive integer code."""


class NonNumericField(MtlrError):
    """A numeric input file contains a non-numeric field."""


class IoError(MtlrError):
    """Failed to read or write a results file."""
