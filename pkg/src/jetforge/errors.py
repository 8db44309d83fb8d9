"""Exception types raised across jetforge."""


class JetForgeError(Exception):
    """Base class for all jetforge errors."""


class DimensionError(JetForgeError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(JetForgeError, ValueError):
    """A precondition of an operation was violated."""


class ConfigError(JetForgeError, ValueError):
    """A configuration violates one of its invariants."""


class NonFiniteError(JetForgeError, FloatingPointError):
    """A NaN or Inf was produced or encountered."""


class ParseError(JetForgeError, ValueError):
    """An input file could not be parsed."""


class PruningError(JetForgeError, RuntimeError):
    """A pruning request cannot be satisfied without breaking the model."""


class TrainingDiverged(NonFiniteError):
    """Training loss became non-finite."""

    def __init__(self, epoch, message=None):
        self.epoch = epoch
        super().__init__(message or f"training diverged at epoch {epoch}: loss is not finite")
