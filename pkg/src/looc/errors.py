"""Exception hierarchy shared by every module in the package."""


class LoocError(Exception):
    """Base class for all package errors."""


class DimensionError(LoocError, ValueError):
    """Operand shapes do not agree."""


class DomainError(LoocError, ValueError):
    """An argument lies outside its admissible range."""


class ContractViolation(LoocError, ValueError):
    """A documented precondition on the input data does not hold."""


class ValidationError(LoocError, ValueError):
    """Structured input (partitions, class maps) is inconsistent."""


class ConfigurationError(LoocError, ValueError):
    """A configuration value or combination is invalid."""


class FormatError(LoocError, ValueError):
    """A binary file does not follow its declared layout."""


class CorruptRecordError(FormatError):
    """A record parsed but carries an impossible value."""
