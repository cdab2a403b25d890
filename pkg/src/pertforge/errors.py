"""Exception types shared across the toolkit."""


class PertforgeError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(PertforgeError):
    """Tensor shapes do not conform to an operation's contract."""


class NumericsError(PertforgeError):
    """A computation produced NaN or Inf."""


class ContractError(PertforgeError):
    """An API precondition was violated by the caller."""


class GraphError(PertforgeError):
    """Backward pass requested on a missing or already-consumed graph."""


class DataError(PertforgeError):
    """Input data violates an invariant (e.g. a mask that is not binary)."""


class CapabilityError(PertforgeError):
    """The model does not support the requested operation."""


class ConfigError(PertforgeError):
    """Invalid or incomplete run configuration."""


class ConvergenceWarning(UserWarning):
    """Training finished without reaching its target metric."""
