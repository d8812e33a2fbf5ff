"""Adam optimizer."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np

from shapeflow.nn.tensor import Tensor


@dataclass
class AdamState:
    """Moments and step counter for a fixed list of parameters."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[Tensor], lr: float, **kwargs) -> "AdamState":
        return cls(
            lr=lr,
            m=[np.zeros(p.shape, dtype=np.float64) for p in params],
            v=[np.zeros(p.shape, dtype=np.float64) for p in params],
            **kwargs,
        )


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState) -> AdamState:
    """
    One bias-corrected Adam update, applied to ``params`` in place.

    Moments are kept in float64 regardless of the parameter dtype.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError(
            f"Adam got {len(params)} params, {len(grads)} grads, {len(state.m)} moment slots"
        )
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for i, (param, grad) in enumerate(zip(params, grads)):
        g = np.asarray(grad, dtype=np.float64)
        if g.shape != param.shape:
            raise ValueError(f"Gradient shape {g.shape} does not match parameter {param.shape}")
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g
        m_hat = state.m[i] / c1
        v_hat = state.v[i] / c2
        update = state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        param.values = (param.values - update).astype(param.dtype)
    return state
