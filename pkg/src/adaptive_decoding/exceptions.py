class InvalidInputError(ValueError):
    """Malformed or out-of-contract input to an operation."""


class InvalidParameterError(ValueError):
    """A numeric parameter outside its admissible range."""


class InvalidConfigError(ValueError):
    """Configuration that cannot describe a valid run."""


class IncompatibleCheckpointError(ValueError):
    """A checkpoint does not match the requested action set or architecture."""


class TrainingDivergedError(RuntimeError):
    """Raised when a loss or gradient becomes non-finite."""
