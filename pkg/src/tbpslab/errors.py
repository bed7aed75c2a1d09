"""Exception types shared across the lab."""


class ConfigError(ValueError):
    """Inconsistent or invalid configuration."""


class DomainError(ValueError):
    """Argument outside the mathematical domain of an operation."""


class EmptyPool(ValueError):
    """Candidate pool became empty after clipping/filtering."""


class PlacementFailure(RuntimeError):
    """Rejection sampling could not satisfy the overlap constraint."""


class DegenerateBox(ValueError):
    """Box region resamples to less than one pixel on some axis."""


class UnknownToken(ValueError):
    """Text token missing from the closed vocabulary."""


class ShapeMismatch(ValueError):
    """Tensor shapes inconsistent with the operation contract."""


class BatchTooSmall(ValueError):
    """Batch-level operation needs at least two samples."""


class NoPositive(ValueError):
    """An anchor has no same-identity match in the batch/gallery."""


class UnknownPid(ValueError):
    """Identity id outside the lookup table."""


class NonFiniteLoss(RuntimeError):
    """A loss component evaluated to NaN or infinity."""


class LengthMismatch(ValueError):
    """Paired sequences have different lengths."""


class MissingPrototype(ValueError):
    """No prototype stored for a requested identity."""


class DegeneratePrototype(ValueError):
    """Identity mean has (near-)zero norm and cannot be normalized."""


class EmptyGallery(ValueError):
    """Ranking requested over an empty gallery."""


class SizeTooLarge(ValueError):
    """Requested gallery subset size exceeds what is available."""


class CheckpointMismatch(RuntimeError):
    """Checkpoint config hash does not match the dataset/config in use."""
