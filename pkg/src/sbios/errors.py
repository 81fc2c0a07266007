"""Exception types shared across the package.

Each class carries the process exit code the command line uses for it.
"""


class SbiosError(Exception):
    exit_code = 1


class ConfigError(SbiosError, ValueError):
    exit_code = 2


class DegenerateKernelError(ConfigError):
    pass


class DomainError(ConfigError):
    pass


class DataError(SbiosError):
    exit_code = 3


class SchemaError(DataError, ValueError):
    pass


class MissingIndexError(DataError, IndexError):
    pass


class DivergenceError(SbiosError, FloatingPointError):
    exit_code = 4

    def __init__(self, message, iteration=None, diagnostic=None):
        super().__init__(message)
        self.iteration = iteration
        self.diagnostic = diagnostic or {}
