"""Exception types shared across the package."""


class ReplayWMError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(ReplayWMError, ValueError):
    """An invariant of a config object or an operation precondition was violated."""


class IngestionError(ReplayWMError, ValueError):
    """A frame directory or action file could not be ingested."""


class TaskLabelError(ReplayWMError, ValueError):
    """A task label was outside the range the model was built for."""


class NumericalError(ReplayWMError, FloatingPointError):
    """A loss term became non-finite.

    ``term`` names the offending part of the objective ("recon" or "kl").
    """

    def __init__(self, term: str, message: str = ""):
        self.term = term
        super().__init__(message or f"non-finite value in loss term '{term}'")


class TrainingDivergedError(ReplayWMError, RuntimeError):
    """Training hit a non-finite loss; model parameters are the last finite state."""

    def __init__(self, iteration: int, term: str):
        self.iteration = iteration
        self.term = term
        super().__init__(
            f"training diverged at iteration {iteration} (non-finite '{term}'); "
            "model holds the last finite parameters"
        )
