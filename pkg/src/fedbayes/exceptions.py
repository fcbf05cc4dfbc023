"""Exception hierarchy shared across the package."""


class FedBayesError(Exception):
    """Base class for all package errors."""


class InvalidMomentError(FedBayesError, ValueError):
    """A Gaussian in moment form has a non-positive variance."""


class NonNormalizableError(FedBayesError, ValueError):
    """A natural-parameter Gaussian has ``eta2 >= 0`` in some coordinate."""


class CavityCollapseError(NonNormalizableError):
    """Removing a client's factor from the posterior left a non-normalizable cavity."""


class ContractViolationError(FedBayesError, ValueError):
    """An input breaks an operation's precondition (e.g. unclipped gradient)."""


class PartitionError(FedBayesError, ValueError):
    """The requested (kappa, rho) split cannot be realised on the data."""


class AdultParseError(FedBayesError, ValueError):
    """A row of a UCI Adult file could not be parsed."""

    def __init__(self, message, lineno=None):
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)
        self.lineno = lineno


class RunComplete(FedBayesError):
    """Raised by the scheduler when every client has exhausted its budget."""
