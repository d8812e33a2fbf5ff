"""Enriched network input built from an SDF window."""

from __future__ import annotations

import numpy as np
import structlog
from scipy.special import expit

from shapeflow.core.exceptions import ConfigError
from shapeflow.models.fields import ScalarField3
from shapeflow.models.schemas import INPUT_LAYOUT, UNetConfig
from shapeflow.services.components import DiffComponent, ShapeSpec, cotangent_array

logger = structlog.get_logger()

SDF_CHANNEL = INPUT_LAYOUT.index("sdf")
MASK_CHANNEL = INPUT_LAYOUT.index("mask")


def positional_channels(dims) -> np.ndarray:
    """``sin(2 pi t)``, ``cos(2 pi t)`` per axis with ``t = i / (n - 1)``; shape ``(6,) + dims``."""
    channels = []
    for axis, n in enumerate(dims):
        t = np.arange(n, dtype=np.float64) / (n - 1)
        shape = [1, 1, 1]
        shape[axis] = n
        t = np.broadcast_to(t.reshape(shape), tuple(dims))
        channels.append(np.sin(2.0 * np.pi * t))
        channels.append(np.cos(2.0 * np.pi * t))
    return np.stack(channels)


def obstacle_mask(sdf: np.ndarray, mode: str, temperature: float) -> np.ndarray:
    if mode == "hard":
        return (sdf < 0).astype(np.float64)
    if not temperature > 0:
        raise ConfigError(f"Sigmoid mask needs temperature > 0, got {temperature}")
    return expit(-sdf / temperature)


def build_input(sdf: ScalarField3, cfg: UNetConfig, sdf_scale: float = 1.0) -> np.ndarray:
    """
    Stack the 8 input channels for one window.

    Args:
        sdf: SDF window
        cfg: Network config (mask mode and temperature)
        sdf_scale: Corpus ``max|SDF|`` dividing channel 0

    Returns:
        Array of shape ``(8,) + sdf.spec.dims``
    """
    if not sdf_scale > 0:
        raise ConfigError(f"sdf_scale must be positive, got {sdf_scale}")
    values = np.asarray(sdf.values, dtype=np.float64)
    out = np.empty((len(INPUT_LAYOUT),) + values.shape)
    out[SDF_CHANNEL] = values / sdf_scale
    out[1:7] = positional_channels(values.shape)
    out[MASK_CHANNEL] = obstacle_mask(values, cfg.mask_mode, cfg.mask_temperature)
    return out


def build_input_vjp(sdf: ScalarField3, cfg: UNetConfig, cotangent: np.ndarray, sdf_scale: float = 1.0) -> np.ndarray:
    """Pull an input-tensor cotangent back to SDF nodes; the hard mask passes nothing."""
    cot = np.asarray(cotangent, dtype=np.float64)
    grad = cot[SDF_CHANNEL] / sdf_scale
    if cfg.mask_mode == "sigmoid":
        m = obstacle_mask(np.asarray(sdf.values), "sigmoid", cfg.mask_temperature)
        grad = grad - cot[MASK_CHANNEL] * m * (1.0 - m) / cfg.mask_temperature
    return grad


class InputComponent(DiffComponent):
    """SDF window -> enriched input tensor."""

    name = "build-input"

    def __init__(self, cfg: UNetConfig, window_dims, sdf_scale: float = 1.0):
        self.cfg = cfg
        self.sdf_scale = sdf_scale
        self.input_shape = ShapeSpec("scalar_field", tuple(window_dims))
        self.output_shape = ShapeSpec("tensor", (len(INPUT_LAYOUT),) + tuple(window_dims))

    def forward(self, x: ScalarField3) -> np.ndarray:
        return build_input(x, self.cfg, self.sdf_scale)

    def vjp(self, x: ScalarField3, cotangent) -> np.ndarray:
        return build_input_vjp(x, self.cfg, cotangent_array(cotangent), self.sdf_scale)
