"""Exception hierarchy shared by every module of the toolkit."""


class UnlearningError(Exception):
    """Base class for all errors raised by the toolkit."""


class ConfigurationError(UnlearningError):
    """Invalid configuration or infeasible parameters."""


class ContractError(UnlearningError):
    """An operation was called with arguments violating its preconditions."""


class IngestionError(UnlearningError):
    """A dataset directory or labels file could not be ingested."""


class NumericalError(UnlearningError):
    """A computation produced non-finite values."""
