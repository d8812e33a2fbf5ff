"""
Differentiable component contract.

Every pipeline stage exposes ``forward(x) -> y`` and
``vjp(x, cotangent_y) -> cotangent_x``. Cotangents of fields are plain
arrays shaped like the field's ``values``; cotangents of design vectors are
1-D arrays; cotangents of scalars are floats.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Any, Callable, List, Optional, Sequence, Tuple

import numpy as np
import structlog

from shapeflow.core.exceptions import ShapeMismatchError
from shapeflow.models.fields import VectorField3

logger = structlog.get_logger()


@dataclass(frozen=True)
class ShapeSpec:
    """Shape descriptor of a component input or output."""

    kind: str  # "vector", "scalar_field", "vector_field", "scalar", "tensor"
    dims: Optional[Tuple[int, ...]] = None

    def compatible(self, other: "ShapeSpec") -> bool:
        if self.kind != other.kind:
            return False
        return self.dims is None or other.dims is None or tuple(self.dims) == tuple(other.dims)

    def __str__(self) -> str:
        return f"{self.kind}{list(self.dims) if self.dims is not None else ''}"


def cotangent_array(cotangent: Any) -> Any:
    """Accept fields as cotangents by taking their values."""
    values = getattr(cotangent, "values", None)
    return values if isinstance(values, np.ndarray) else cotangent


class DiffComponent(ABC):
    """A pipeline stage with a forward map and its vector-Jacobian product."""

    name: str = "component"
    input_shape: ShapeSpec = ShapeSpec("vector")
    output_shape: ShapeSpec = ShapeSpec("vector")

    @abstractmethod
    def forward(self, x: Any) -> Any:
        """Primal evaluation."""

    @abstractmethod
    def vjp(self, x: Any, cotangent: Any) -> Any:
        """Pull an output cotangent back to the input at ``x``."""

    def __call__(self, x: Any) -> Any:
        return self.forward(x)

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.name}: {self.input_shape} -> {self.output_shape})"


class LambdaComponent(DiffComponent):
    """Component built from a pair of callables."""

    def __init__(
        self,
        name: str,
        forward: Callable[[Any], Any],
        vjp: Callable[[Any, Any], Any],
        input_shape: ShapeSpec = ShapeSpec("vector"),
        output_shape: ShapeSpec = ShapeSpec("vector"),
    ):
        self.name = name
        self._forward = forward
        self._vjp = vjp
        self.input_shape = input_shape
        self.output_shape = output_shape

    def forward(self, x):
        return self._forward(x)

    def vjp(self, x, cotangent):
        return self._vjp(x, cotangent_array(cotangent))


class Chain(DiffComponent):
    """Left-to-right composition; the vjp runs the stage vjps right-to-left."""

    def __init__(self, components: Sequence[DiffComponent]):
        if not components:
            raise ValueError("chain needs at least one component")
        for i in range(len(components) - 1):
            left, right = components[i], components[i + 1]
            if not left.output_shape.compatible(right.input_shape):
                raise ShapeMismatchError(
                    f"Chain link {i}: '{left.name}' outputs {left.output_shape} "
                    f"but '{right.name}' expects {right.input_shape}"
                )
        self.components: List[DiffComponent] = list(components)
        self.name = " -> ".join(c.name for c in self.components)
        self.input_shape = self.components[0].input_shape
        self.output_shape = self.components[-1].output_shape

    def forward_trace(self, x: Any) -> List[Any]:
        """Inputs of every stage followed by the final output."""
        values = [x]
        for component in self.components:
            values.append(component.forward(values[-1]))
        return values

    def forward(self, x):
        return self.forward_trace(x)[-1]

    def value_and_vjp(self, x: Any, cotangent: Any) -> Tuple[Any, Any]:
        trace = self.forward_trace(x)
        cot = cotangent_array(cotangent)
        for component, stage_input in zip(reversed(self.components), reversed(trace[:-1])):
            cot = component.vjp(stage_input, cot)
        return trace[-1], cot

    def vjp(self, x, cotangent):
        return self.value_and_vjp(x, cotangent)[1]


def chain(components: Sequence[DiffComponent]) -> DiffComponent:
    """Compose components; a single component is returned unchanged."""
    if len(components) == 1:
        return components[0]
    return Chain(components)


class MeanVelocityX(DiffComponent):
    """Scalar objective: mean x-velocity over the field."""

    name = "qoi"

    def __init__(self, dims: Optional[Tuple[int, int, int]] = None):
        self.input_shape = ShapeSpec("vector_field", dims)
        self.output_shape = ShapeSpec("scalar")

    def forward(self, x: VectorField3) -> float:
        return float(np.mean(x.values[..., 0]))

    def vjp(self, x: VectorField3, cotangent) -> np.ndarray:
        grad = np.zeros(x.values.shape, dtype=np.float64)
        grad[..., 0] = float(cotangent) / x.spec.num_nodes
        return grad
