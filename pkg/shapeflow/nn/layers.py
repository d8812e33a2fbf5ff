"""Parameterized layers built from the functional primitives."""

from __future__ import annotations

import math
from typing import Dict, Iterator, List, Tuple

import numpy as np

from shapeflow.nn import functional as F
from shapeflow.nn.tensor import Tensor


class Module:
    """Container of parameters and sub-modules with deterministic ordering."""

    def __init__(self):
        self._params: Dict[str, Tensor] = {}
        self._children: Dict[str, "Module"] = {}

    def add_param(self, name: str, values: np.ndarray) -> Tensor:
        tensor = Tensor(values, requires_grad=True, name=name)
        self._params[name] = tensor
        return tensor

    def add_module(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, tensor in self._params.items():
            yield prefix + name, tensor
        for name, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> List[Tensor]:
        return [t for _, t in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(t.values.size for t in self.parameters()))

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: t.values.copy() for name, t in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]):
        params = dict(self.named_parameters())
        missing = sorted(set(params) - set(state))
        unexpected = sorted(set(state) - set(params))
        if missing or unexpected:
            raise KeyError(f"State mismatch: missing={missing} unexpected={unexpected}")
        for name, tensor in params.items():
            values = np.asarray(state[name])
            if values.shape != tensor.shape:
                raise ValueError(f"Parameter {name}: shape {values.shape} != {tensor.shape}")
            tensor.values = np.ascontiguousarray(values, dtype=tensor.dtype)

    def __call__(self, *args):
        return self.forward(*args)

    def forward(self, *args):
        raise NotImplementedError


class Conv3d(Module):
    """Same-size convolution with He-uniform initialization and zero bias."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, rng: np.random.Generator):
        super().__init__()
        fan_in = in_channels * kernel_size ** 3
        bound = math.sqrt(6.0 / fan_in)
        shape = (out_channels, in_channels, kernel_size, kernel_size, kernel_size)
        self.weight = self.add_param("weight", rng.uniform(-bound, bound, size=shape))
        self.bias = self.add_param("bias", np.zeros(out_channels))

    def forward(self, x: Tensor) -> Tensor:
        return F.conv3d(x, self.weight, self.bias)


class LayerNorm(Module):
    """Per-voxel normalization over channels."""

    def __init__(self, channels: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.gamma = self.add_param("gamma", np.ones(channels))
        self.beta = self.add_param("beta", np.zeros(channels))

    def forward(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, self.gamma, self.beta, axes=(1,), eps=self.eps)


class ConvBlock(Module):
    """conv 3x3x3 -> layer norm -> GELU."""

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator):
        super().__init__()
        self.conv = self.add_module("conv", Conv3d(in_channels, out_channels, 3, rng))
        self.norm = self.add_module("norm", LayerNorm(out_channels))

    def forward(self, x: Tensor) -> Tensor:
        return F.gelu(self.norm(self.conv(x)))


class AttentionGate(Module):
    """
    Additive attention on a skip connection.

    ``alpha = sigmoid(psi(gelu(W_x skip + up(W_g gating))))`` and the output is
    ``alpha * skip``. The gating signal lives one level coarser than the skip
    and is brought to the skip resolution after its 1x1 projection.
    """

    def __init__(self, skip_channels: int, gating_channels: int, inter_channels: int, rng: np.random.Generator):
        super().__init__()
        self.w_x = self.add_module("w_x", Conv3d(skip_channels, inter_channels, 1, rng))
        self.w_g = self.add_module("w_g", Conv3d(gating_channels, inter_channels, 1, rng))
        self.psi = self.add_module("psi", Conv3d(inter_channels, 1, 1, rng))

    def coefficients(self, gating: Tensor, skip: Tensor) -> Tensor:
        g = self.w_g(gating)
        if g.shape[2:] != skip.shape[2:]:
            g = F.upsample2(g)
        return F.sigmoid(self.psi(F.gelu(F.add(self.w_x(skip), g))))

    def forward(self, gating: Tensor, skip: Tensor) -> Tensor:
        return F.mul(self.coefficients(gating, skip), skip)
