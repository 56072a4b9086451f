class ParameterError(ValueError):
    """A model or experiment parameter violates a precondition."""


class CapacityError(RuntimeError):
    """An exact computation was requested beyond its enumeration cap."""


class NumericalError(ArithmeticError):
    """An internal numerical invariant was violated."""
