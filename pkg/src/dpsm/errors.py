"""Exception hierarchy shared by all modules.

The CLI maps these onto exit codes: ``DataError`` -> 2, ``NumericError`` -> 3.
"""


class DpsmError(Exception):
    pass


class ConfigError(DpsmError, ValueError):
    pass


class DataError(DpsmError):
    pass


class FormatError(DataError):
    """A binary or text artifact is corrupt, truncated or has the wrong version."""


class ShapeError(DpsmError, ValueError):
    pass


class NumericError(DpsmError, ArithmeticError):
    pass


class SamplingError(DpsmError):
    pass


class RequestError(DpsmError):
    pass
