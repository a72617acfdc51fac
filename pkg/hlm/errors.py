"""Exception hierarchy; ``exit_code`` is what the CLI returns for each family."""


class HlmError(Exception):
    exit_code = 1


class ConfigError(HlmError):
    exit_code = 3


class DataError(HlmError):
    exit_code = 4


class NumericError(HlmError, ArithmeticError):
    exit_code = 5


class ShapeError(HlmError, ValueError):
    pass


class ContractError(HlmError, RuntimeError):
    pass


class TokenIndexError(HlmError, IndexError):
    pass
