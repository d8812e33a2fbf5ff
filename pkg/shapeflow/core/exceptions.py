"""Exception hierarchy shared by all pipeline stages."""

from typing import Optional, Sequence


class ShapeFlowError(Exception):
    """Base class for toolkit errors."""


class ConfigError(ShapeFlowError, ValueError):
    """Invalid or missing configuration."""


class GridRangeError(ShapeFlowError, ValueError):
    """A query point lies outside a grid's bounding box."""

    def __init__(self, axis: int, value: float, lo: float, hi: float):
        self.axis = axis
        self.value = value
        self.lo = lo
        self.hi = hi
        name = "xyz"[axis]
        super().__init__(
            f"Point out of grid bounds on axis {name}: {value!r} not in [{lo!r}, {hi!r}]"
        )


class WindowError(ShapeFlowError, ValueError):
    """A crop window does not fit inside its source grid."""

    def __init__(self, window_origin: Sequence[int], window_dims: Sequence[int], source_dims: Sequence[int]):
        self.window_origin = tuple(window_origin)
        self.window_dims = tuple(window_dims)
        self.source_dims = tuple(source_dims)
        super().__init__(
            f"Window origin={self.window_origin} dims={self.window_dims} "
            f"exceeds source dims={self.source_dims}"
        )


class ShapeMismatchError(ShapeFlowError, ValueError):
    """Incompatible shapes between tensors or pipeline components."""


class DatasetFormatError(ShapeFlowError, ValueError):
    """Malformed field or dataset file."""

    def __init__(self, message: str, path: Optional[str] = None, offset: Optional[int] = None):
        self.path = path
        self.offset = offset
        parts = []
        if path:
            parts.append(str(path))
        if offset is not None:
            parts.append(f"byte offset {offset}")
        where = f" ({', '.join(parts)})" if parts else ""
        super().__init__(f"{message}{where}")


class SpecMismatchError(DatasetFormatError):
    """Scalar and vector files of one sample disagree on their grid."""


class MeshError(ShapeFlowError):
    """Surface extraction or mesh IO failure."""


class TrainingDivergedError(ShapeFlowError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch: int, batch: int, loss: float):
        self.epoch = epoch
        self.batch = batch
        self.loss = loss
        super().__init__(f"Non-finite loss {loss!r} at epoch {epoch}, batch {batch}")


class MMAError(ShapeFlowError, ValueError):
    """Invalid input to the MMA update."""


class ChainError(ShapeFlowError):
    """A pipeline stage failed during optimization."""

    def __init__(self, iteration: int, cause: Exception):
        self.iteration = iteration
        self.cause = cause
        super().__init__(f"Chain evaluation failed at iteration {iteration}: {cause}")


class GradientCheckError(ShapeFlowError):
    """A vector-Jacobian product disagrees with finite differences."""


class CheckpointError(DatasetFormatError):
    """Malformed or incompatible model checkpoint."""
