"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Array dimensions are inconsistent with what an operation requires."""


class UnsupportedDimensionError(ValueError):
    """An operation was given 3D data where only 2D is supported (or vice versa)."""


class FormatError(ValueError):
    """A file on disk is malformed. ``path`` names the offending file."""

    def __init__(self, message: str, path=None):
        self.path = None if path is None else str(path)
        super().__init__(f"{self.path}: {message}" if self.path else message)


class NonFiniteLossError(FloatingPointError):
    """Training produced a NaN/Inf loss."""

    def __init__(self, iteration: int, terms: dict):
        self.iteration = iteration
        self.terms = dict(terms)
        super().__init__(f"non-finite loss at iteration {iteration}: {self.terms}")
