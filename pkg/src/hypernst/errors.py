"""Exception types. CLI exit codes hang off the first three."""


class ConfigError(ValueError):
    exit_code = 2


class DataError(RuntimeError):
    exit_code = 3


class NumericError(FloatingPointError):
    exit_code = 4


class ShapeError(ValueError):
    pass
