"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    """An argument violates a documented precondition."""


class TrainingDiverged(RuntimeError):
    """Training produced a non-finite loss; the message names the step."""
