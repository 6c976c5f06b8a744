"""Exception types shared by the numerics and the pipeline."""


class KeyRateError(Exception):
    """Base class for failures in the key-rate machinery."""


class InfeasibleError(KeyRateError):
    """The constraint set is empty (within tolerance).

    ``certificate`` holds the quantity proving it, e.g. the optimal
    minimum eigenvalue of the phase-one problem.
    """

    def __init__(self, message, certificate=None):
        super().__init__(message)
        self.certificate = certificate


class NumericalFailure(KeyRateError):
    """An iterative routine stopped without reaching its tolerance."""

    def __init__(self, message, achieved=None):
        super().__init__(message)
        self.achieved = achieved


class NotHermitianError(KeyRateError, ValueError):
    """A matrix expected to be Hermitian is not; usually a corrupted state upstream."""
