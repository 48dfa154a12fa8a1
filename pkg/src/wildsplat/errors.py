"""Exception taxonomy shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible (broadcast or inner-dimension mismatch)."""


class DomainError(ValueError):
    """An input value lies outside an operation's mathematical domain."""

    def __init__(self, message, index=None):
        super().__init__(message if index is None else f"{message} (flat index {index})")
        self.index = index


class ContractError(ValueError):
    """A caller violated an API precondition (e.g. non-scalar loss)."""


class StateError(RuntimeError):
    """An operation was invoked in an invalid lifecycle state."""


class DegeneracyError(ValueError):
    """Inputs are degenerate: singular covariance, all-masked image, etc."""


class NumericError(ArithmeticError):
    """A numeric failure (NaN/divergence) with location context."""

    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step
