"""Trained surrogate as a differentiable pipeline stage."""

from __future__ import annotations

from pathlib import Path
from typing import Union

import numpy as np
import structlog

from shapeflow.core.exceptions import CheckpointError
from shapeflow.models.fields import ScalarField3, VectorField3
from shapeflow.models.schemas import SurrogateManifest
from shapeflow.nn.checkpoint import load_checkpoint, save_checkpoint
from shapeflow.nn.tensor import Tape, Tensor
from shapeflow.services.components import DiffComponent, ShapeSpec, cotangent_array
from shapeflow.services.surrogate.inputs import build_input, build_input_vjp
from shapeflow.services.surrogate.unet import UNet

logger = structlog.get_logger()

PathLike = Union[str, Path]


class Surrogate:
    """U-Net plus the normalization constants it was trained with."""

    def __init__(self, model: UNet, manifest: SurrogateManifest):
        self.model = model
        self.manifest = manifest

    @property
    def v_max(self) -> float:
        return self.manifest.v_max

    @property
    def sdf_scale(self) -> float:
        return self.manifest.sdf_scale

    def input_tensor(self, sdf: ScalarField3, requires_grad: bool = False) -> Tensor:
        return Tensor(build_input(sdf, self.model.cfg, self.sdf_scale)[None], requires_grad=requires_grad)

    def predict_normalized(self, sdf: ScalarField3) -> np.ndarray:
        """Raw network output ``(D, H, W, 3)``."""
        out = self.model(self.input_tensor(sdf))
        return np.moveaxis(out.values[0], 0, -1)

    def predict(self, sdf: ScalarField3) -> VectorField3:
        return VectorField3(sdf.spec, self.predict_normalized(sdf).astype(np.float64) * self.v_max)

    def save(self, path: PathLike) -> Path:
        return save_checkpoint(path, self.model.state_dict(), self.manifest.model_dump(mode="json"))


def load_surrogate(path: PathLike) -> Surrogate:
    """Rebuild a surrogate from a UNW1 checkpoint."""
    config, state = load_checkpoint(path)
    try:
        manifest = SurrogateManifest.model_validate(config)
    except ValueError as e:
        raise CheckpointError(f"Checkpoint manifest is not a surrogate manifest: {e}", str(path)) from e
    model = UNet(manifest.unet)
    try:
        model.load_state_dict(state)
    except (KeyError, ValueError) as e:
        raise CheckpointError(f"Checkpoint does not match its architecture: {e}", str(path)) from e
    logger.info("Surrogate loaded", path=str(path), parameters=model.num_parameters(), v_max=manifest.v_max)
    return Surrogate(model, manifest)


class InferenceComponent(DiffComponent):
    """
    SDF window -> velocity window.

    Forward builds the enriched input, runs the U-Net and scales by ``v_max``;
    the vjp backpropagates through all three. Instances hold no mutable
    state, so concurrent calls are safe.
    """

    name = "unet-inference"

    def __init__(self, surrogate: Surrogate):
        self.surrogate = surrogate
        window = tuple(surrogate.manifest.window)
        self.input_shape = ShapeSpec("scalar_field", window)
        self.output_shape = ShapeSpec("vector_field", window)

    def forward(self, x: ScalarField3) -> VectorField3:
        return self.surrogate.predict(x)

    def vjp(self, x: ScalarField3, cotangent) -> np.ndarray:
        cot = np.asarray(cotangent_array(cotangent), dtype=np.float64)
        seed = np.moveaxis(cot, -1, 0)[None] * self.surrogate.v_max
        with Tape() as tape:
            inputs = self.surrogate.input_tensor(x, requires_grad=True)
            out = self.surrogate.model(inputs)
        (grad,) = tape.gradients(out, [inputs], seed=seed)
        return build_input_vjp(x, self.surrogate.model.cfg, grad[0], self.surrogate.sdf_scale)


def inference_component(checkpoint: Union[PathLike, Surrogate]) -> InferenceComponent:
    surrogate = checkpoint if isinstance(checkpoint, Surrogate) else load_surrogate(checkpoint)
    return InferenceComponent(surrogate)
