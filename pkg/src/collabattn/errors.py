"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand dimensions do not conform."""


class NumericalError(ArithmeticError):
    """An iterative routine failed to converge or produced non-finite values."""


class TrainingError(NumericalError):
    """Toy training diverged."""

    def __init__(self, step: int, message: str = "loss is not finite"):
        super().__init__(f"step {step}: {message}")
        self.step = step


class BundleError(Exception):
    """Base class for weight bundle problems."""


class BundleParseError(BundleError):
    """The bundle header could not be parsed; ``path`` names the offending field."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


class BundleValidationError(BundleError):
    """Header parsed but shapes, offsets or required names are inconsistent."""
