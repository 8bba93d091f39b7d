"""Exception hierarchy shared across the package."""


class SpeckleForgeError(Exception):
    """Base class for all errors raised by speckle-forge."""


class ValidationError(SpeckleForgeError, ValueError):
    """Bad parameters, violated preconditions, or unusable inputs.

    The CLI maps this class to exit code 1; everything else that escapes
    a stage is treated as a runtime failure (exit code 2).
    """


class FormatError(ValidationError):
    """Malformed input file (raster, map, warp, or config)."""


class StageError(SpeckleForgeError):
    """A pipeline stage failed; carries the stage name for context."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"{stage}: {message}")
        self.stage = stage
