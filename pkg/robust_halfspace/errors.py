class HalfspaceError(Exception):
    """Base class of every error the package raises on purpose."""
    exit_code = 1


class ConfigError(HalfspaceError):
    exit_code = 1


class DataError(HalfspaceError):
    exit_code = 1


class InfeasibleError(DataError):
    exit_code = 1


class OutputError(HalfspaceError):
    exit_code = 2


class NumericalError(HalfspaceError):
    exit_code = 3
