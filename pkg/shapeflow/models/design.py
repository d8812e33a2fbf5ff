"""Design parameters of the rounded-cone primitive."""

from __future__ import annotations

from dataclasses import astuple, dataclass
from typing import Sequence, Tuple

import numpy as np

PARAM_NAMES: Tuple[str, ...] = ("r_a", "r_b", "L", "theta_x", "theta_y", "theta_z")


@dataclass(frozen=True)
class DesignParams:
    """
    Rounded cone: convex hull of sphere A (center origin, radius ``r_a``)
    and sphere B (center ``(L, 0, 0)``, radius ``r_b``) in the body frame,
    rotated by Euler angles in radians.
    """

    r_a: float
    r_b: float
    L: float
    theta_x: float = 0.0
    theta_y: float = 0.0
    theta_z: float = 0.0

    def __post_init__(self):
        for name in PARAM_NAMES:
            object.__setattr__(self, name, float(getattr(self, name)))
        if not self.r_a > 0 or not self.r_b > 0:
            raise ValueError(f"Radii must be positive, got r_a={self.r_a}, r_b={self.r_b}")
        if not self.L >= 0:
            raise ValueError(f"Axis length must be non-negative, got L={self.L}")

    def to_array(self) -> np.ndarray:
        return np.array(astuple(self), dtype=np.float64)

    @classmethod
    def from_array(cls, values: Sequence[float]) -> "DesignParams":
        if len(values) != len(PARAM_NAMES):
            raise ValueError(f"Expected {len(PARAM_NAMES)} design values, got {len(values)}")
        return cls(*(float(v) for v in values))

    def replace(self, **changes: float) -> "DesignParams":
        data = dict(zip(PARAM_NAMES, astuple(self)))
        data.update(changes)
        return DesignParams(**data)
