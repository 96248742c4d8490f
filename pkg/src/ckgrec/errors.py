"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
BackendError -> 4.
"""


class CkgError(Exception):
    pass


class ConfigError(CkgError):
    pass


class DataError(CkgError):
    pass


class BackendError(CkgError):
    pass


class BudgetExceededError(BackendError):
    pass


class NonFiniteLossError(CkgError):
    pass
