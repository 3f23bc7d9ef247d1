"""Exception types shared across the package."""


class TPPTError(Exception):
    """Base class for all package errors."""


class ContractError(TPPTError, ValueError):
    """A caller violated a documented precondition."""


class GraphError(TPPTError, ValueError):
    """Tensors connected in a graph have incompatible shapes."""


class NumericalError(TPPTError, ArithmeticError):
    """A value or gradient became non-finite."""


class ConfigError(TPPTError, ValueError):
    """An experiment configuration failed validation."""


class PretrainingError(TPPTError, RuntimeError):
    """The frozen backbone did not beat chance after pretraining."""
