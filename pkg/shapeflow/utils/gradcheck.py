"""Central finite-difference checks of component vector-Jacobian products."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import structlog

from shapeflow.core.exceptions import GradientCheckError
from shapeflow.services.components import DiffComponent, cotangent_array

logger = structlog.get_logger()


@dataclass
class StageCheck:
    """Outcome of one component check."""

    stage: str
    max_rel_error: float
    tolerance: float
    probes: int
    # coordinate name -> (vjp, finite difference), vector inputs only
    coordinates: Dict[str, Tuple[float, float]] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_error) and self.max_rel_error <= self.tolerance)


def _values(y: Any) -> np.ndarray:
    if np.isscalar(y) or isinstance(y, (float, int)):
        return np.asarray(float(y))
    return np.asarray(cotangent_array(y), dtype=np.float64)


def _input_values(x: Any) -> np.ndarray:
    return np.asarray(cotangent_array(x), dtype=np.float64)


def _shift(x: Any, direction: np.ndarray, h: float) -> Any:
    if hasattr(x, "with_values"):
        return x.with_values(np.asarray(x.values) + h * direction)
    return np.asarray(x, dtype=np.float64) + h * direction


# per-direction scale floor, as a fraction of the largest finite difference
RELATIVE_FLOOR = 1e-2
ABSOLUTE_FLOOR = 1e-12


def relative_error(analytic: Sequence[float], numeric: Sequence[float]) -> float:
    """
    Worst per-direction error ``max_i |a_i - b_i| / max(|b_i|, floor)``.

    ``floor`` is ``RELATIVE_FLOOR * max|b|`` (at least ``ABSOLUTE_FLOOR``), so
    directions with a near-zero derivative are judged against the stage scale
    instead of their own rounding noise.
    """
    a = np.asarray(analytic, dtype=np.float64)
    b = np.asarray(numeric, dtype=np.float64)
    if not a.size:
        return 0.0
    magnitude = np.abs(b)
    floor = max(RELATIVE_FLOOR * float(magnitude.max()), ABSOLUTE_FLOOR)
    return float(np.max(np.abs(a - b) / np.maximum(magnitude, floor)))


def check_component(
    component: DiffComponent,
    x: Any,
    stage: str,
    tolerance: float,
    probes: int = 20,
    step: float = 1e-4,
    rng: Optional[np.random.Generator] = None,
    candidates: Optional[np.ndarray] = None,
    names: Optional[Sequence[str]] = None,
) -> StageCheck:
    """
    Compare ``<vjp(x, w), d>`` against ``d/dh <w, F(x + h d)>``.

    A single random output cotangent ``w`` is used. Vector inputs are probed
    along every coordinate axis first, then along random unit directions;
    field inputs are probed one node at a time, drawn from ``candidates``
    (a boolean mask) when given.
    """
    rng = rng or np.random.default_rng(0)
    y0 = component.forward(x)
    w = rng.standard_normal(_values(y0).shape)
    grad = _input_values(component.vjp(x, w if w.ndim else float(w)))
    base = _input_values(x)

    def phi(point) -> float:
        return float(np.sum(w * _values(component.forward(point))))

    directions: List[np.ndarray] = []
    if base.ndim == 1:
        for i in range(base.size):
            directions.append(np.eye(base.size)[i])
        while len(directions) < probes:
            d = rng.standard_normal(base.size)
            directions.append(d / np.linalg.norm(d))
    else:
        pool = np.argwhere(candidates) if candidates is not None else np.argwhere(np.ones(base.shape, bool))
        picks = rng.choice(len(pool), size=min(probes, len(pool)), replace=False)
        for idx in pool[np.sort(picks)]:
            d = np.zeros(base.shape)
            d[tuple(idx)] = 1.0
            directions.append(d)

    analytic, numeric = [], []
    for d in directions:
        analytic.append(float(np.sum(grad * d)))
        numeric.append((phi(_shift(x, d, step)) - phi(_shift(x, d, -step))) / (2.0 * step))

    coordinates = {}
    if names is not None and base.ndim == 1:
        coordinates = {n: (analytic[i], numeric[i]) for i, n in enumerate(names)}

    result = StageCheck(stage, relative_error(analytic, numeric), tolerance, len(directions), coordinates)
    logger.info(
        "Gradient check",
        stage=stage,
        max_rel_error=result.max_rel_error,
        tolerance=tolerance,
        passed=result.passed,
    )
    return result


def assert_passed(results: Sequence[StageCheck]):
    failed = [r for r in results if not r.passed]
    if failed:
        detail = ", ".join(f"{r.stage}={r.max_rel_error:.3g}>{r.tolerance:g}" for r in failed)
        raise GradientCheckError(f"Gradient check failed: {detail}")
