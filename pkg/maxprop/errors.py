# maxprop/errors.py
"""Exception hierarchy shared by every maxprop module."""


class MaxPropError(Exception):
    """Base class for all errors raised by the library."""


class ShapeMismatchError(MaxPropError):
    """Operands of an operation have incompatible shapes."""


class TapeError(MaxPropError):
    """Misuse of a gradient tape (foreign tape, non-scalar loss, ...)."""


class CombinerError(MaxPropError):
    """Invalid combiner parameters or operands."""


class SpecError(MaxPropError):
    """A block, network, JTE or ensemble description is inconsistent."""


class DatasetFormatError(MaxPropError):
    """A dataset file could not be parsed."""


class BadMagicError(DatasetFormatError):
    pass


class TruncatedFileError(DatasetFormatError):
    pass


class CountMismatchError(DatasetFormatError):
    pass


class LabelRangeError(DatasetFormatError):
    pass


class ConfigError(MaxPropError):
    """Run configuration, manifest or metrics schema is invalid."""


class WeightsMismatchError(MaxPropError):
    """A weights file does not fit the model it is loaded into."""
