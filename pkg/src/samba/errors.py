"""Exception hierarchy; the CLI maps these to exit codes."""


class SambaError(Exception):
    exit_code = 1


class ConfigError(SambaError, ValueError):
    exit_code = 2


class ContractError(SambaError, ValueError):
    """Violated precondition of an operation (bad argument, non-scalar loss)."""

    exit_code = 2


class DimensionError(ContractError):
    pass


class DataError(SambaError):
    exit_code = 3


class CorruptDataError(DataError):
    pass


class VersionError(DataError):
    pass


class NumericError(SambaError, ArithmeticError):
    exit_code = 4
