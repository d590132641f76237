"""Exception types shared across the package."""


class DegenerateInputError(ValueError):
    """Input is valid in shape but numerically degenerate for the operation
    (zero matrix where a direction is needed, all-tied ranks, zero target
    accuracy, ...)."""


class TrainingDivergedError(RuntimeError):
    """Training produced a non-finite loss; carries the diagnostic context."""
