"""Exception hierarchy shared by every stage of the pipeline."""


class PMRLError(Exception):
    """Base class for all package errors."""


class DimensionError(PMRLError, ValueError):
    """Array extents do not agree with what an operation needs."""


class ContractError(PMRLError, RuntimeError):
    """A call violated a documented precondition."""


class DegeneratePlaneError(PMRLError, ValueError):
    """Plane is grazing, has vanishing offset, or faces away from the camera."""


class BehindCameraError(PMRLError, ValueError):
    """A point has non-positive depth in the camera that projects it."""


class GenerationError(PMRLError, RuntimeError):
    """Scene generation could not satisfy its constraints."""


class ParseError(PMRLError, ValueError):
    """Malformed file. Carries the path and the byte offset of the failure."""

    def __init__(self, path, offset, message):
        self.path = str(path)
        self.offset = int(offset)
        super().__init__(f"{self.path}: byte {self.offset}: {message}")


class ConfigError(PMRLError, ValueError):
    """Configuration key unknown or value out of range."""


class NumericAbort(PMRLError, FloatingPointError):
    """Training produced a non-finite loss."""

    def __init__(self, message, dump=None):
        self.dump = dump or {}
        super().__init__(message)
