"""Evaluation metrics for surrogate predictions."""

from __future__ import annotations

from typing import Sequence, Tuple

import numpy as np

from shapeflow.core.exceptions import ShapeMismatchError
from shapeflow.models.fields import VectorField3
from shapeflow.utils.vector import pearson_correlation


def nearest_neighbor_gradient(values: np.ndarray, spacing: Sequence[float]) -> np.ndarray:
    """
    Gradient magnitude of a scalar grid by one-sided differences.

    Forward differences everywhere except the last node of each axis, which
    uses the backward difference.
    """
    v = np.asarray(values, dtype=np.float64)
    squared = np.zeros_like(v)
    for axis in range(3):
        d = np.diff(v, axis=axis) / spacing[axis]
        last = np.take(d, [-1], axis=axis)
        squared += np.concatenate([d, last], axis=axis) ** 2
    return np.sqrt(squared)


def error_gradient_corr(pred: VectorField3, target: VectorField3) -> Tuple[float, bool]:
    """
    Pearson correlation between ``|grad eps|`` and ``|pred|``.

    ``eps`` is the per-node magnitude of ``target - pred``.

    Returns:
        Tuple of (correlation in [-1, 1], degenerate). A zero-variance series
        gives ``(0.0, True)``.
    """
    if pred.values.shape != target.values.shape:
        raise ShapeMismatchError(
            f"Prediction shape {pred.values.shape} != target shape {target.values.shape}"
        )
    eps = np.linalg.norm(np.asarray(target.values) - np.asarray(pred.values), axis=-1)
    grad_eps = nearest_neighbor_gradient(eps, pred.spec.spacing)
    return pearson_correlation(grad_eps, np.linalg.norm(pred.values, axis=-1))
