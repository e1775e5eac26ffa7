"""Exception hierarchy. Each class carries the CLI exit code for its failure class."""


class StkgError(Exception):
    exit_code = 1


class ConfigError(StkgError, ValueError):
    """Invalid configuration or inconsistent options."""

    exit_code = 2


class DataError(StkgError, ValueError):
    """Malformed or inconsistent input data."""

    exit_code = 3


class ParseError(DataError):
    def __init__(self, message, line_no=None, path=None):
        self.line_no = line_no
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}:"
        if line_no is not None:
            where += f"{line_no}:"
        super().__init__(f"{where} {message}".strip())


class TrainingError(StkgError, RuntimeError):
    """Numerical failure during optimization."""

    exit_code = 4
