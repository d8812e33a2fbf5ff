"""Field sampling, cropping and the crop pipeline stage."""

from __future__ import annotations

from typing import Optional, Sequence, Tuple, Union

import numpy as np
import structlog

from shapeflow.core.exceptions import GridRangeError, WindowError
from shapeflow.models.fields import Field3, GridSpec, Int3, ScalarField3
from shapeflow.services.components import DiffComponent, ShapeSpec, cotangent_array

logger = structlog.get_logger()

# tolerance on the bounding box, in units of spacing
_BOUNDS_EPS = 1e-9


def _cell_coordinates(spec: GridSpec, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    origin = np.asarray(spec.origin)
    spacing = np.asarray(spec.spacing)
    dims = np.asarray(spec.dims)
    t = (points - origin) / spacing
    for axis in range(3):
        col = t[:, axis]
        bad = (col < -_BOUNDS_EPS) | (col > dims[axis] - 1 + _BOUNDS_EPS) | ~np.isfinite(col)
        if np.any(bad):
            value = float(points[np.argmax(bad), axis])
            raise GridRangeError(axis, value, spec.origin[axis], spec.upper[axis])
    t = np.clip(t, 0.0, dims - 1)
    base = np.minimum(np.floor(t).astype(np.int64), dims - 2)
    return base, t - base


def trilinear_sample_many(field: Field3, points: np.ndarray) -> np.ndarray:
    """
    Trilinear interpolation at many points.

    Args:
        field: Scalar or vector field
        points: Array of shape (N, 3)

    Returns:
        Array of shape (N,) for scalar fields or (N, 3) for vector fields

    Raises:
        GridRangeError: If a point lies outside the grid's bounding box
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    base, frac = _cell_coordinates(field.spec, pts)
    i, j, k = base[:, 0], base[:, 1], base[:, 2]
    fx, fy, fz = frac[:, 0], frac[:, 1], frac[:, 2]
    v = field.values
    if field.kind == "vector":
        fx, fy, fz = fx[:, None], fy[:, None], fz[:, None]

    c00 = v[i, j, k] * (1 - fx) + v[i + 1, j, k] * fx
    c10 = v[i, j + 1, k] * (1 - fx) + v[i + 1, j + 1, k] * fx
    c01 = v[i, j, k + 1] * (1 - fx) + v[i + 1, j, k + 1] * fx
    c11 = v[i, j + 1, k + 1] * (1 - fx) + v[i + 1, j + 1, k + 1] * fx
    c0 = c00 * (1 - fy) + c10 * fy
    c1 = c01 * (1 - fy) + c11 * fy
    return c0 * (1 - fz) + c1 * fz


def trilinear_sample(field: Field3, point: Sequence[float]) -> Union[float, np.ndarray]:
    """Trilinear blend of the 8 nodes surrounding ``point``; exact at nodes."""
    result = trilinear_sample_many(field, np.asarray(point, dtype=np.float64).reshape(1, 3))[0]
    return float(result) if field.kind == "scalar" else np.asarray(result)


def _check_window(source_dims: Int3, window_origin: Int3, window_dims: Int3):
    ok = all(
        window_dims[a] >= 2
        and window_origin[a] >= 0
        and window_origin[a] + window_dims[a] <= source_dims[a]
        for a in range(3)
    )
    if not ok:
        raise WindowError(window_origin, window_dims, source_dims)


def crop_to_window(field: Field3, window_origin: Sequence[int], window_dims: Sequence[int]) -> Field3:
    """Copy a node-aligned sub-window; the result's origin is shifted accordingly."""
    wo = tuple(int(v) for v in window_origin)
    wd = tuple(int(v) for v in window_dims)
    _check_window(field.spec.dims, wo, wd)
    spec = field.spec.window(wo, wd)
    values = field.values[wo[0]:wo[0] + wd[0], wo[1]:wo[1] + wd[1], wo[2]:wo[2] + wd[2]]
    return type(field)(spec, values)


def crop_vjp(
    source_spec: GridSpec,
    window_origin: Sequence[int],
    cotangent: np.ndarray,
) -> np.ndarray:
    """Scatter a window cotangent into a zero array shaped like the source."""
    cot = np.asarray(cotangent_array(cotangent), dtype=np.float64)
    wd = cot.shape[:3]
    wo = tuple(int(v) for v in window_origin)
    _check_window(source_spec.dims, wo, wd)
    out = np.zeros(source_spec.dims + cot.shape[3:], dtype=np.float64)
    out[wo[0]:wo[0] + wd[0], wo[1]:wo[1] + wd[1], wo[2]:wo[2] + wd[2]] = cot
    return out


def centered_window(sdf: ScalarField3, window_dims: Sequence[int]) -> Int3:
    """
    Window origin centering ``window_dims`` on the obstacle.

    The obstacle centroid is the mean node index of the negative SDF
    region, rounded to the nearest node; an SDF without negative nodes
    centers the window on the grid. The origin is clamped into the grid.
    """
    dims = np.asarray(sdf.spec.dims)
    wd = np.asarray(window_dims, dtype=np.int64)
    if np.any(wd > dims):
        raise WindowError((0, 0, 0), tuple(wd), tuple(dims))
    inside = np.argwhere(sdf.values < 0)
    center = inside.mean(axis=0) if len(inside) else (dims - 1) / 2.0
    origin = np.rint(center).astype(np.int64) - wd // 2
    origin = np.clip(origin, 0, dims - wd)
    return tuple(int(v) for v in origin)


class CropComponent(DiffComponent):
    """
    Crop stage of the optimization chain.

    ``window_origin=None`` tracks the obstacle: the window is recentered on
    the input's obstacle centroid at every evaluation. Window placement is
    piecewise constant and carries no gradient.
    """

    name = "interpolate-to-grid"

    def __init__(
        self,
        source_dims: Int3,
        window_dims: Int3,
        window_origin: Optional[Int3] = None,
    ):
        self.window_dims = tuple(int(v) for v in window_dims)
        self.window_origin = None if window_origin is None else tuple(int(v) for v in window_origin)
        if self.window_origin is not None:
            _check_window(tuple(source_dims), self.window_origin, self.window_dims)
        self.input_shape = ShapeSpec("scalar_field", tuple(source_dims))
        self.output_shape = ShapeSpec("scalar_field", self.window_dims)

    def origin_for(self, field: ScalarField3) -> Int3:
        if self.window_origin is not None:
            return self.window_origin
        return centered_window(field, self.window_dims)

    def forward(self, x: ScalarField3) -> ScalarField3:
        return crop_to_window(x, self.origin_for(x), self.window_dims)

    def vjp(self, x: ScalarField3, cotangent) -> np.ndarray:
        return crop_vjp(x.spec, self.origin_for(x), cotangent)
