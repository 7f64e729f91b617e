"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class BlockStyleError(Exception):
    exit_code = 1


class ConfigError(BlockStyleError, ValueError):
    exit_code = 2


class InputError(BlockStyleError, ValueError):
    """Bad user-level input (empty text, zero-area image, ...)."""

    exit_code = 2


class ImageIOError(BlockStyleError, OSError):
    exit_code = 3


class NumericError(BlockStyleError, ArithmeticError):
    exit_code = 4


class ShapeError(NumericError):
    pass


class DegenerateError(NumericError):
    """A vector that must be normalized came out (numerically) zero."""


class StepOrderError(NumericError):
    pass
