"""Exception types shared across the package."""


class ConfigError(ValueError):
    """A configuration value is outside its documented bounds."""


class UnsupportedPerturbation(ValueError):
    """The requested perturbation cannot be applied to this task."""


class ParseError(ValueError):
    """Text could not be parsed into a token sequence.

    ``position`` is the character offset where parsing failed.
    """

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at char {position})")
        self.position = position


class TrainingError(RuntimeError):
    """Numerical failure inside a training step."""


class UpdateRejected(TrainingError):
    """An optimizer update was refused because a gradient was not finite."""
