"""
Method of Moving Asymptotes for bound-constrained maximization.

The objective is maximized by minimizing its negation. With box constraints
only, the convex separable MMA subproblem decouples per variable:

    min  p / (u - y) + q / (y - l)    over  alfa <= y <= beta

whose minimizer is ``y = (sqrt(p) l + sqrt(q) u) / (sqrt(p) + sqrt(q))``
clamped to ``[alfa, beta]``. The regularization weight of ``p`` and ``q`` is
raised to the secant curvature of the objective measured between the last
two iterates, so the approximation is never flatter than the objective
along each coordinate.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import structlog

from shapeflow.core.exceptions import ChainError, MMAError
from shapeflow.models.schemas import StopCriteria
from shapeflow.services.components import Chain, DiffComponent
from shapeflow.services.metrics import RunMetrics
from shapeflow.utils.io import fmt17, write_table

logger = structlog.get_logger()

ASY_INIT = 0.5
ASY_INCR = 1.2
ASY_DECR = 0.7
ASY_MIN = 0.01
ASY_MAX = 10.0
ALBEFA = 0.5
RAA0 = 1e-5


@dataclass(frozen=True)
class MMAState:
    """Iterate, history and asymptotes of the MMA loop."""

    x: np.ndarray
    xmin: np.ndarray
    xmax: np.ndarray
    low: np.ndarray
    upp: np.ndarray
    x_old1: Optional[np.ndarray] = None
    x_old2: Optional[np.ndarray] = None
    dg_old: Optional[np.ndarray] = None
    iteration: int = 0

    @property
    def free(self) -> np.ndarray:
        return self.xmax > self.xmin

    @property
    def span(self) -> np.ndarray:
        return np.maximum(self.xmax - self.xmin, 1e-5)


def init_state(x0: Sequence[float], xmin: Sequence[float], xmax: Sequence[float]) -> MMAState:
    """Starting state; raises MMAError if ``x0`` violates its bounds."""
    x = np.asarray(x0, dtype=np.float64).copy()
    lo = np.asarray(xmin, dtype=np.float64).copy()
    hi = np.asarray(xmax, dtype=np.float64).copy()
    if not (x.shape == lo.shape == hi.shape):
        raise MMAError(f"Shape mismatch: x0 {x.shape}, xmin {lo.shape}, xmax {hi.shape}")
    if np.any(lo > hi):
        raise MMAError("Lower bounds exceed upper bounds")
    if np.any(x < lo) or np.any(x > hi):
        raise MMAError(f"Initial design {x.tolist()} is outside its bounds")
    span = np.maximum(hi - lo, 1e-5)
    return MMAState(x=x, xmin=lo, xmax=hi, low=x - ASY_INIT * span, upp=x + ASY_INIT * span)


def asymptotes(state: MMAState, iteration: int) -> Tuple[np.ndarray, np.ndarray]:
    """Asymptotes for step ``iteration`` (1-based)."""
    x, span = state.x, state.span
    if iteration <= 2 or state.x_old1 is None or state.x_old2 is None:
        return x - ASY_INIT * span, x + ASY_INIT * span
    trend = (x - state.x_old1) * (state.x_old1 - state.x_old2)
    factor = np.where(trend < 0, ASY_DECR, ASY_INCR)
    low = x - factor * (state.x_old1 - state.low)
    upp = x + factor * (state.upp - state.x_old1)
    low = np.clip(low, x - ASY_MAX * span, x - ASY_MIN * span)
    upp = np.clip(upp, x + ASY_MIN * span, x + ASY_MAX * span)
    return low, upp


def subproblem_coefficients(
    x: np.ndarray,
    dg: np.ndarray,
    low: np.ndarray,
    upp: np.ndarray,
    span: np.ndarray,
    rho: np.ndarray,
) -> Tuple[np.ndarray, np.ndarray]:
    """``p`` and ``q`` of the separable approximation of the minimized objective."""
    ux = upp - x
    xl = x - low
    base = 0.001 * np.abs(dg) + rho / span
    p = ux * ux * (np.maximum(dg, 0.0) + base)
    q = xl * xl * (np.maximum(-dg, 0.0) + base)
    return p, q


def solve_subproblem(
    p: np.ndarray,
    q: np.ndarray,
    low: np.ndarray,
    upp: np.ndarray,
    alfa: np.ndarray,
    beta: np.ndarray,
) -> np.ndarray:
    """Closed-form per-coordinate minimizer of ``p/(u-y) + q/(y-l)`` on ``[alfa, beta]``."""
    sp, sq = np.sqrt(p), np.sqrt(q)
    y = (sp * low + sq * upp) / (sp + sq)
    return np.clip(y, alfa, beta)


def mma_step(state: MMAState, f: float, grad: Sequence[float]) -> MMAState:
    """
    One MMA update that increases ``f``.

    Args:
        state: Current state
        f: Objective at ``state.x``
        grad: Gradient of ``f`` at ``state.x``

    Returns:
        State whose ``x`` is the next iterate

    Raises:
        MMAError: If ``f`` or ``grad`` is not finite
    """
    g = np.asarray(grad, dtype=np.float64)
    if not np.isfinite(f) or not np.all(np.isfinite(g)):
        raise MMAError(f"Non-finite objective or gradient at iteration {state.iteration + 1}")
    if g.shape != state.x.shape:
        raise MMAError(f"Gradient shape {g.shape} does not match design shape {state.x.shape}")

    iteration = state.iteration + 1
    x, span = state.x, state.span
    dg = -g
    low, upp = asymptotes(state, iteration)

    rho = np.full_like(x, RAA0)
    if state.x_old1 is not None and state.dg_old is not None:
        dx = x - state.x_old1
        moved = np.abs(dx) > 1e-12 * span
        curvature = np.where(moved, (dg - state.dg_old) / np.where(moved, dx, 1.0), 0.0)
        curvature = np.maximum(curvature, 0.0)
        rho = np.maximum(RAA0, curvature * span / (2.0 * (1.0 / (upp - x) + 1.0 / (x - low))))

    alfa = np.maximum(state.xmin, x - ALBEFA * (x - low))
    beta = np.minimum(state.xmax, x + ALBEFA * (upp - x))
    p, q = subproblem_coefficients(x, dg, low, upp, span, rho)
    y = np.where(state.free, solve_subproblem(p, q, low, upp, alfa, beta), x)

    return replace(
        state,
        x=y,
        low=low,
        upp=upp,
        x_old1=x.copy(),
        x_old2=None if state.x_old1 is None else state.x_old1.copy(),
        dg_old=dg,
        iteration=iteration,
    )


def relative_change(state: MMAState) -> float:
    """``max |dx| / (xmax - xmin)`` over free variables of the last step."""
    if state.x_old1 is None or not np.any(state.free):
        return 0.0
    change = np.abs(state.x - state.x_old1)[state.free] / (state.xmax - state.xmin)[state.free]
    return float(np.max(change))


@dataclass
class TrajectoryRecord:
    iteration: int
    x: np.ndarray
    objective: float
    grad_norm: float
    rel_change: float


@dataclass
class Trajectory:
    records: List[TrajectoryRecord] = field(default_factory=list)
    final_x: Optional[np.ndarray] = None
    final_objective: Optional[float] = None
    converged: bool = False

    @property
    def iterations(self) -> int:
        return len(self.records)


def value_and_grad(component: DiffComponent, x: np.ndarray) -> Tuple[float, np.ndarray]:
    if isinstance(component, Chain):
        value, grad = component.value_and_vjp(x, 1.0)
    else:
        value = component.forward(x)
        grad = component.vjp(x, 1.0)
    return float(value), np.asarray(grad, dtype=np.float64)


def optimize(
    chain: DiffComponent,
    x0: Sequence[float],
    bounds: Tuple[Sequence[float], Sequence[float]],
    stop: StopCriteria,
    metrics: Optional[RunMetrics] = None,
    callback: Optional[Callable[[TrajectoryRecord], None]] = None,
) -> Trajectory:
    """
    Maximize the scalar output of ``chain`` over its design vector.

    Each iteration evaluates the chain and its vjp with a unit cotangent,
    records ``(iteration, x, objective, |grad|, rel_change)`` and applies an
    MMA step. The loop ends after ``stop.max_iters`` iterations or once the
    relative change falls below ``stop.rel_change_tol``. The final iterate
    is evaluated once more for ``final_objective``.

    Raises:
        ChainError: A stage failed; carries the iteration index
    """
    state = init_state(x0, *bounds)
    trajectory = Trajectory()

    def evaluate(x: np.ndarray, iteration: int) -> Tuple[float, np.ndarray]:
        try:
            return value_and_grad(chain, x)
        except Exception as e:
            logger.error("Chain evaluation failed", iteration=iteration, error=str(e))
            raise ChainError(iteration, e) from e

    for iteration in range(1, stop.max_iters + 1):
        x = state.x.copy()
        objective, grad = evaluate(x, iteration)
        state = mma_step(state, objective, grad)
        rel = relative_change(state)
        record = TrajectoryRecord(iteration, x, objective, float(np.linalg.norm(grad)), rel)
        trajectory.records.append(record)
        if metrics is not None:
            metrics.record_iteration(objective, record.grad_norm)
        if callback is not None:
            callback(record)
        logger.info(
            "MMA iteration",
            iteration=iteration,
            objective=objective,
            grad_norm=record.grad_norm,
            rel_change=rel,
        )
        if rel < stop.rel_change_tol:
            trajectory.converged = True
            break

    trajectory.final_x = state.x.copy()
    trajectory.final_objective = float(chain.forward(state.x)) if trajectory.records else None
    logger.info(
        "Optimization finished",
        iterations=trajectory.iterations,
        converged=trajectory.converged,
        final_objective=trajectory.final_objective,
    )
    return trajectory


TRAJECTORY_COLUMNS = ["iter", "r_a", "r_b", "L", "theta_z", "objective", "grad_norm", "rel_change"]


def write_trajectory(path: Path, trajectory: Trajectory) -> Path:
    """Trajectory CSV of design-shaped (6-vector) iterates."""
    rows = []
    for r in trajectory.records:
        rows.append(
            {
                "iter": str(r.iteration),
                "r_a": fmt17(r.x[0]),
                "r_b": fmt17(r.x[1]),
                "L": fmt17(r.x[2]),
                "theta_z": fmt17(r.x[5]),
                "objective": fmt17(r.objective),
                "grad_norm": fmt17(r.grad_norm),
                "rel_change": fmt17(r.rel_change),
            }
        )
    return write_table(path, rows, TRAJECTORY_COLUMNS)
