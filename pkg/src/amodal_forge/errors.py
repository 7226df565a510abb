"""Exception types shared across the toolkit."""


class AmodalForgeError(Exception):
    """Base class for all toolkit errors."""

    code = "error"


class ShapeMismatchError(AmodalForgeError):
    """Operands have incompatible dimensions."""

    code = "shape_mismatch"


class EmptyMaskError(AmodalForgeError):
    """Operation requires at least one set pixel."""

    code = "empty_mask"


class CorruptRleError(AmodalForgeError):
    """Run-length data does not describe a valid mask."""

    code = "corrupt_rle"


class BoxError(AmodalForgeError):
    """Invalid or degenerate bounding box."""

    code = "bad_box"


class ExhaustionError(AmodalForgeError):
    """Bounded rejection sampling ran out of retries."""

    code = "exhausted"


class ConfigError(AmodalForgeError):
    """Invalid configuration value or file."""

    code = "bad_config"


class TapeError(AmodalForgeError):
    """Misuse of the gradient tape (non-scalar loss, double backward, ...)."""

    code = "tape_error"


class DegenerateVectorError(AmodalForgeError):
    """Vector norm below tolerance where a direction is required."""

    code = "degenerate_vector"


class TrainingDivergedError(AmodalForgeError):
    """Loss became NaN/Inf during training."""

    code = "diverged"


class CheckpointError(AmodalForgeError):
    """Checkpoint file is corrupt or does not match the model topology."""

    code = "bad_checkpoint"
