"""Exception types shared across the package."""


class DeltaISSError(Exception):
    pass


class DomainError(DeltaISSError, ValueError):
    """A step oracle was queried outside the domain where it is defined."""


class BoxViolation(DeltaISSError, ValueError):
    """A state or input left its admissible box.

    ``index`` is the trajectory step at which the exit was detected, when known.
    """

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class InfeasibleBudget(DeltaISSError):
    pass


class BarrierViolation(DeltaISSError):
    """The Lipschitz certificate matrix is not strictly positive definite."""


class SchemaError(DeltaISSError, ValueError):
    """Malformed model, sample-set or config file."""
