"""Exception hierarchy shared by every module.

The CLI maps each family to a fixed exit code, so raise the narrowest class.
"""


class PeraError(Exception):
    exit_code = 3


class ConfigurationError(PeraError):
    exit_code = 2


class ContractError(PeraError):
    """A caller broke a documented precondition (shape, dimensionality...)."""

    exit_code = 3


class NumericalError(PeraError):
    exit_code = 3


class TrainingError(PeraError):
    exit_code = 3


class AugmentationError(PeraError):
    exit_code = 3


class CapabilityError(PeraError):
    """The checkpoint lacks a component the operation needs."""

    exit_code = 3


class IngestionError(PeraError):
    exit_code = 4


class CheckpointError(PeraError):
    exit_code = 4
