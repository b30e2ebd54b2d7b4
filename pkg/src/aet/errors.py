"""Exception hierarchy shared across the package."""


class AetError(Exception):
    """Base class for all errors raised by this package."""


# transformation algebra
class SingularTransform(AetError):
    pass


class DegenerateCorners(AetError):
    pass


class PointAtInfinity(AetError):
    pass


class EmptySampleSet(AetError):
    pass


class LengthMismatch(AetError):
    pass


# autodiff / layers
class ShapeMismatch(AetError):
    pass


class DegenerateBatch(AetError):
    pass


class LabelOutOfRange(AetError):
    pass


class NotScalar(AetError):
    pass


class DisconnectedLoss(AetError):
    pass


class MissingGradient(AetError):
    pass


class NonFiniteError(AetError):
    """A forward or backward pass produced NaN or Inf."""

    def __init__(self, op, phase="forward"):
        self.op = op
        self.phase = phase
        super().__init__(f"non-finite values in {phase} pass of '{op}'")


class CheckpointError(AetError):
    pass


# model
class BadTap(AetError):
    pass


class ArchMismatch(AetError):
    pass


# data
class MissingFile(AetError):
    pass


class CorruptRecord(AetError):
    pass


class BadLabel(AetError):
    pass


class IndexOutOfRange(AetError):
    pass


class EmptyDataset(AetError):
    pass


# orchestration
class NonFiniteLoss(AetError):
    def __init__(self, epoch, batch):
        self.epoch = epoch
        self.batch = batch
        super().__init__(f"non-finite AET loss at epoch {epoch}, batch {batch}")


class ConfigError(AetError):
    pass


class MalformedCsv(AetError):
    def __init__(self, path, line, reason):
        self.path = path
        self.line = line
        super().__init__(f"{path}:{line}: {reason}")


class IoFailure(AetError):
    pass
