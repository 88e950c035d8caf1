class FeatFedError(Exception):
    """Base class for all errors raised by featfed."""


class InvalidArchitectureError(FeatFedError, ValueError):
    pass


class ShapeError(FeatFedError, ValueError):
    pass


class NumericError(FeatFedError, ArithmeticError):
    """A loss or gradient became non-finite. ``value`` holds the offender."""

    def __init__(self, message, value=None):
        super().__init__(message)
        self.value = value


class DegenerateInputError(FeatFedError, ValueError):
    pass


class LabelError(FeatFedError, ValueError):
    pass


class StratificationError(FeatFedError, ValueError):
    pass


class ParseError(FeatFedError, ValueError):
    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class AggregationError(FeatFedError, ValueError):
    pass


class EncodingError(FeatFedError, ValueError):
    pass


class ConfigError(FeatFedError, ValueError):
    pass


class ParameterError(FeatFedError, ValueError):
    pass
