"""Exception hierarchy shared by every module."""


class MotionDiffError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(MotionDiffError, ValueError):
    pass


class IndexOutOfRange(MotionDiffError, IndexError):
    pass


class InvalidSize(MotionDiffError, ValueError):
    pass


# skeleton
class InvalidSkeleton(MotionDiffError, ValueError):
    pass


class CycleDetected(InvalidSkeleton):
    pass


class Disconnected(InvalidSkeleton):
    pass


class DuplicateEdge(InvalidSkeleton):
    pass


class SelfLoop(InvalidSkeleton):
    pass


# autodiff
class NonScalarLoss(MotionDiffError, ValueError):
    pass


# diffusion
class StepOutOfRange(MotionDiffError, ValueError):
    pass


# metrics
class TooFewSamples(MotionDiffError, ValueError):
    pass


class EmptyMultimodalSet(MotionDiffError):
    """Raised for items without a multimodal ground-truth set; callers exclude them."""


# data / containers
class ContainerError(MotionDiffError, IOError):
    pass


class BadMagic(ContainerError):
    pass


class TruncatedFile(ContainerError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class VersionMismatch(ContainerError):
    pass


class ShapeInconsistent(ContainerError):
    pass


class SequenceTooShort(MotionDiffError, ValueError):
    pass


class ConfigError(MotionDiffError, ValueError):
    def __init__(self, message: str, path: str | None = None, line: int | None = None):
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(where + message)
        self.path = path
        self.line = line
