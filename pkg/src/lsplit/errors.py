"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class LsError(Exception):
    exit_code = 1


class ConfigError(LsError, ValueError):
    exit_code = 2


class ContractError(LsError, ValueError):
    exit_code = 3


class ShapeError(ContractError):
    pass


class ParseError(ContractError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class TrainingInfeasibleError(ContractError):
    pass


class NumericError(LsError, ArithmeticError):
    exit_code = 4


class DegenerateSplitError(LsError):
    exit_code = 5
