"""
Rounded-cone geometry.

The primitive is the convex hull of sphere A (center at the origin, radius
``r_a``) and sphere B (center ``(L, 0, 0)``, radius ``r_b``) in the body
frame. The body is rotated about the origin by intrinsic Euler rotations
applied in order X, then Y, then Z about body axes, i.e. a body-frame
vector ``q`` maps to world ``R q`` with ``R = Rx(theta_x) @ Ry(theta_y) @ Rz(theta_z)``.
Queries are brought into the body frame with ``R^T``.

Signed distances use the closed-form three-branch round-cone formula (cap A,
cap B, lateral cone); parameter derivatives are analytic. Where the branch
test ties, the lateral branch is taken.
"""

from __future__ import annotations

from pathlib import Path
from typing import List, Sequence, Tuple, Union

import numpy as np
import structlog

from shapeflow.models.design import PARAM_NAMES, DesignParams
from shapeflow.models.fields import GridSpec, ScalarField3
from shapeflow.models.schemas import SamplingRanges
from shapeflow.services.components import DiffComponent, ShapeSpec, cotangent_array
from shapeflow.utils.io import fmt17, read_table, write_table

logger = structlog.get_logger()

ParamsLike = Union[DesignParams, Sequence[float], np.ndarray]


def _as_array(params: ParamsLike) -> np.ndarray:
    if isinstance(params, DesignParams):
        return params.to_array()
    arr = np.asarray(params, dtype=np.float64).ravel()
    if arr.size != 6:
        raise ValueError(f"Expected 6 design values, got {arr.size}")
    return arr


def rotation_matrices(theta_x: float, theta_y: float, theta_z: float) -> Tuple[np.ndarray, List[np.ndarray]]:
    """Rotation ``R = Rx Ry Rz`` and its derivatives with respect to each angle."""
    cx, sx = np.cos(theta_x), np.sin(theta_x)
    cy, sy = np.cos(theta_y), np.sin(theta_y)
    cz, sz = np.cos(theta_z), np.sin(theta_z)

    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    drx = np.array([[0, 0, 0], [0, -sx, -cx], [0, cx, -sx]])
    dry = np.array([[-sy, 0, cy], [0, 0, 0], [-cy, 0, -sy]])
    drz = np.array([[-sz, -cz, 0], [cz, -sz, 0], [0, 0, 0]])

    rotation = rx @ ry @ rz
    derivatives = [drx @ ry @ rz, rx @ dry @ rz, rx @ ry @ drz]
    return rotation, derivatives


def round_cone_sdf(params: ParamsLike, points: np.ndarray, with_gradient: bool = False):
    """
    Signed distance of world points to the rounded cone.

    Args:
        params: Design vector ``(r_a, r_b, L, theta_x, theta_y, theta_z)``
        points: Array of shape (N, 3)
        with_gradient: Also return the (N, 6) parameter Jacobian

    Returns:
        Distances of shape (N,), optionally with the Jacobian
    """
    r_a, r_b, length, tx, ty, tz = _as_array(params)
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    rotation, d_rotation = rotation_matrices(tx, ty, tz)

    # body frame: p_b = R^T p, written for row vectors
    pb = pts @ rotation
    x, y, z = pb[:, 0], pb[:, 1], pb[:, 2]
    rho = np.sqrt(y * y + z * z)

    n = len(pts)
    values = np.empty(n)
    jac = np.zeros((n, 6)) if with_gradient else None
    # body-frame spatial gradient, used for the angle derivatives
    gb = np.zeros((n, 3)) if with_gradient else None

    def _sphere(cx: float, radius: float, mask: np.ndarray, radius_col: int, moves_with_L: bool):
        dx = x[mask] - cx
        dist = np.sqrt(dx * dx + rho[mask] ** 2)
        values[mask] = dist - radius
        if with_gradient:
            safe = np.where(dist > 0, dist, 1.0)
            g = np.where(dist[:, None] > 0, np.stack([dx, y[mask], z[mask]], axis=1) / safe[:, None], 0.0)
            gb[mask] = g
            jac[mask, radius_col] = -1.0
            if moves_with_L:
                jac[mask, 2] = -g[:, 0]

    if length + r_b <= r_a:
        _sphere(0.0, r_a, np.ones(n, dtype=bool), 0, False)
    elif length + r_a <= r_b:
        _sphere(length, r_b, np.ones(n, dtype=bool), 1, True)
    else:
        b = (r_a - r_b) / length
        a = np.sqrt(1.0 - b * b)
        k = -b * rho + a * x
        cap_a = k < 0.0
        cap_b = k > a * length
        lateral = ~(cap_a | cap_b)

        _sphere(0.0, r_a, cap_a, 0, False)
        _sphere(length, r_b, cap_b, 1, True)

        xl, rl = x[lateral], rho[lateral]
        values[lateral] = a * rl + b * xl - r_a
        if with_gradient:
            ratio = b / a
            jac[lateral, 0] = -ratio * rl / length + xl / length - 1.0
            jac[lateral, 1] = ratio * rl / length - xl / length
            jac[lateral, 2] = (b * b / (a * length)) * rl - b * xl / length
            safe = np.where(rl > 0, rl, 1.0)
            gy = np.where(rl > 0, a * y[lateral] / safe, 0.0)
            gz = np.where(rl > 0, a * z[lateral] / safe, 0.0)
            gb[lateral] = np.stack([np.full_like(xl, b), gy, gz], axis=1)

    if not with_gradient:
        return values

    for col, d_rot in zip((3, 4, 5), d_rotation):
        dpb = pts @ d_rot
        jac[:, col] = np.einsum("ij,ij->i", gb, dpb)
    return values, jac


def sdf_point(params: ParamsLike, point: Sequence[float]) -> float:
    """Exact signed distance at one point; negative inside."""
    return float(round_cone_sdf(params, np.asarray(point, dtype=np.float64).reshape(1, 3))[0])


def sdf_grid(params: ParamsLike, spec: GridSpec) -> ScalarField3:
    """Node-wise SDF on a regular grid."""
    values = round_cone_sdf(params, spec.node_positions().reshape(-1, 3))
    return ScalarField3(spec, values.reshape(spec.dims))


def sdf_grid_jacobian(params: ParamsLike, spec: GridSpec) -> Tuple[ScalarField3, np.ndarray]:
    """SDF field and its parameter Jacobian of shape ``dims + (6,)``."""
    values, jac = round_cone_sdf(params, spec.node_positions().reshape(-1, 3), with_gradient=True)
    return ScalarField3(spec, values.reshape(spec.dims)), jac.reshape(spec.dims + (6,))


def sdf_grid_vjp(params: ParamsLike, spec: GridSpec, cotangent: np.ndarray) -> np.ndarray:
    """Gradient of ``<cotangent, SDF>`` with respect to the 6 design values."""
    _, jac = sdf_grid_jacobian(params, spec)
    cot = np.asarray(cotangent_array(cotangent), dtype=np.float64)
    return np.tensordot(cot, jac, axes=([0, 1, 2], [0, 1, 2]))


class GeometryComponent(DiffComponent):
    """Design vector -> SDF grid stage."""

    name = "geometry"

    def __init__(self, spec: GridSpec):
        self.spec = spec
        self.input_shape = ShapeSpec("vector", (6,))
        self.output_shape = ShapeSpec("scalar_field", spec.dims)

    def forward(self, x) -> ScalarField3:
        return sdf_grid(x, self.spec)

    def vjp(self, x, cotangent) -> np.ndarray:
        return sdf_grid_vjp(x, self.spec, cotangent)


def sample_designs(ranges: SamplingRanges, count: int) -> List[DesignParams]:
    """
    Draw designs uniformly from the configured intervals.

    Radii, length and the configured free angle are sampled; the other two
    angles are fixed at 0. Draws are made design by design, so the first
    ``n`` designs do not depend on ``count``.
    """
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    rng = np.random.default_rng(ranges.seed)
    free = ("r_a", "r_b", "L", ranges.free_angle)
    lows = np.array([getattr(ranges, name)[0] for name in free])
    highs = np.array([getattr(ranges, name)[1] for name in free])

    designs = []
    for _ in range(count):
        draw = rng.uniform(lows, highs)
        values = dict.fromkeys(PARAM_NAMES, 0.0)
        values.update(zip(free, draw.tolist()))
        designs.append(DesignParams(**values))
    logger.debug("Designs sampled", count=count, free_angle=ranges.free_angle, seed=ranges.seed)
    return designs


DESIGN_COLUMNS = list(PARAM_NAMES)


def write_designs(path: Union[str, Path], designs: Sequence[DesignParams]) -> Path:
    rows = [
        {name: fmt17(value) for name, value in zip(PARAM_NAMES, d.to_array())}
        for d in designs
    ]
    return write_table(path, rows, DESIGN_COLUMNS)


def read_designs(path: Union[str, Path]) -> List[DesignParams]:
    frame = read_table(path)
    missing = [c for c in DESIGN_COLUMNS if c not in frame.columns]
    if missing:
        raise ValueError(f"Design CSV {path} lacks columns {missing}")
    return [DesignParams(*(float(row[c]) for c in DESIGN_COLUMNS)) for _, row in frame.iterrows()]
