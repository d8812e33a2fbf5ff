"""Regular-grid field containers.

Arrays are indexed ``values[i, j, k]`` (plus a trailing component axis for
vector fields). The serialized layout order is x-fastest: node ``(i, j, k)``
is element ``i + nx * (j + ny * k)``; vector fields store the three
components of a node consecutively.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Tuple, Union

import numpy as np

Vec3 = Tuple[float, float, float]
Int3 = Tuple[int, int, int]


@dataclass(frozen=True)
class GridSpec:
    """Geometry of a regular grid."""

    origin: Vec3
    spacing: Vec3
    dims: Int3

    def __post_init__(self):
        origin = tuple(float(v) for v in self.origin)
        spacing = tuple(float(v) for v in self.spacing)
        dims = tuple(int(v) for v in self.dims)
        if len(origin) != 3 or len(spacing) != 3 or len(dims) != 3:
            raise ValueError("GridSpec needs 3 components for origin, spacing and dims")
        if any(not s > 0 for s in spacing):
            raise ValueError(f"Grid spacing must be positive, got {spacing}")
        if any(d < 2 for d in dims):
            raise ValueError(f"Grid dims must be >= 2 per axis, got {dims}")
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "dims", dims)

    @property
    def num_nodes(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]

    @property
    def upper(self) -> Vec3:
        """Position of the last node on each axis."""
        return tuple(self.origin[a] + (self.dims[a] - 1) * self.spacing[a] for a in range(3))

    def axis_coords(self, axis: int) -> np.ndarray:
        return self.origin[axis] + np.arange(self.dims[axis], dtype=np.float64) * self.spacing[axis]

    def node_position(self, i: int, j: int, k: int) -> np.ndarray:
        return np.array(
            [
                self.origin[0] + i * self.spacing[0],
                self.origin[1] + j * self.spacing[1],
                self.origin[2] + k * self.spacing[2],
            ],
            dtype=np.float64,
        )

    def node_positions(self) -> np.ndarray:
        """All node positions, shape ``dims + (3,)``."""
        x, y, z = np.meshgrid(
            self.axis_coords(0), self.axis_coords(1), self.axis_coords(2), indexing="ij"
        )
        return np.stack([x, y, z], axis=-1)

    def window(self, window_origin: Int3, window_dims: Int3) -> "GridSpec":
        """Spec of a node-aligned sub-window."""
        return GridSpec(
            origin=tuple(self.origin[a] + window_origin[a] * self.spacing[a] for a in range(3)),
            spacing=self.spacing,
            dims=tuple(window_dims),
        )

    def fits(self, window_origin: Int3, window_dims: Int3) -> bool:
        return all(
            0 <= window_origin[a] and window_origin[a] + window_dims[a] <= self.dims[a]
            for a in range(3)
        )


def _frozen(values: np.ndarray) -> np.ndarray:
    arr = np.array(values, dtype=np.float64, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class ScalarField3:
    """Scalar values on a regular grid (e.g. an SDF)."""

    spec: GridSpec
    values: np.ndarray = field(repr=False)

    kind = "scalar"

    def __post_init__(self):
        values = _frozen(self.values)
        if values.shape != self.spec.dims:
            raise ValueError(f"Scalar field shape {values.shape} does not match dims {self.spec.dims}")
        object.__setattr__(self, "values", values)

    def flat(self) -> np.ndarray:
        """Values in layout order (x fastest)."""
        return self.values.ravel(order="F")

    @classmethod
    def from_flat(cls, spec: GridSpec, flat: np.ndarray) -> "ScalarField3":
        return cls(spec, np.asarray(flat, dtype=np.float64).reshape(spec.dims, order="F"))

    def with_values(self, values: np.ndarray) -> "ScalarField3":
        return ScalarField3(self.spec, values)


@dataclass(frozen=True, eq=False)
class VectorField3:
    """3-vector values on a regular grid (e.g. velocity)."""

    spec: GridSpec
    values: np.ndarray = field(repr=False)

    kind = "vector"

    def __post_init__(self):
        values = _frozen(self.values)
        if values.shape != self.spec.dims + (3,):
            raise ValueError(
                f"Vector field shape {values.shape} does not match dims {self.spec.dims} + (3,)"
            )
        object.__setattr__(self, "values", values)

    def flat(self) -> np.ndarray:
        """Values in layout order (x fastest, 3 components per node)."""
        return self.values.transpose(2, 1, 0, 3).ravel()

    @classmethod
    def from_flat(cls, spec: GridSpec, flat: np.ndarray) -> "VectorField3":
        nx, ny, nz = spec.dims
        arr = np.asarray(flat, dtype=np.float64).reshape(nz, ny, nx, 3).transpose(2, 1, 0, 3)
        return cls(spec, arr)

    def with_values(self, values: np.ndarray) -> "VectorField3":
        return VectorField3(self.spec, values)

    def magnitude(self) -> np.ndarray:
        return np.linalg.norm(self.values, axis=-1)


Field3 = Union[ScalarField3, VectorField3]
