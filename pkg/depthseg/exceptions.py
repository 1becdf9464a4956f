class ShapeMismatchError(ValueError):
    """Raised when array shapes or channel counts violate a block/op contract."""


class CheckpointError(ValueError):
    """Raised when a checkpoint is malformed or does not fit the requested model."""
