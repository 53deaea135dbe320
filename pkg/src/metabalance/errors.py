"""Exception hierarchy shared by every module.

The CLI maps each category to its own exit code.
"""


class MetaBalanceError(Exception):
    exit_code = 1


class ConfigurationError(MetaBalanceError):
    """Bad configuration or inconsistent shapes in a graph."""

    exit_code = 2


class ContractViolation(MetaBalanceError):
    """A caller broke a documented precondition (key mismatch, non-scalar loss, ...)."""

    exit_code = 2


class DataError(MetaBalanceError):
    exit_code = 3


class EmptyDatasetError(DataError):
    pass


class TrainingFault(MetaBalanceError):
    """Non-finite loss, norm or update during training."""

    exit_code = 4
