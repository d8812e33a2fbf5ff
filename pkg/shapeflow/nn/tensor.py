"""
Tensors and the gradient tape.

Operations record themselves on the innermost active :class:`Tape` of the
current thread when at least one input is tracked. Backward passes walk the
tape in reverse recording order, which is a reverse topological order of
the computation, and accumulate gradients additively at fan-out.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

_local = threading.local()


def _stack() -> List["Tape"]:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


def default_dtype() -> np.dtype:
    return getattr(_local, "dtype", np.dtype(np.float32))


@contextmanager
def precision(dtype) -> Iterator[None]:
    """Create and compute tensors in ``dtype`` inside the block (per thread)."""
    previous = default_dtype()
    _local.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _local.dtype = previous


class Tensor:
    """Dense array with optional gradient tracking."""

    __slots__ = ("values", "requires_grad", "grad", "name", "_tape", "__weakref__")

    def __init__(self, values, requires_grad: bool = False, name: Optional[str] = None):
        self.values = np.ascontiguousarray(values, dtype=default_dtype())
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._tape: Optional[Tape] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape

    @property
    def dtype(self) -> np.dtype:
        return self.values.dtype

    @property
    def tracked(self) -> bool:
        return self.requires_grad or self._tape is not None

    def numpy(self) -> np.ndarray:
        return self.values

    def item(self) -> float:
        return float(self.values.reshape(-1)[0]) if self.values.size == 1 else float("nan")

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf on the recording tape."""
        if self._tape is None:
            raise RuntimeError("Tensor was not produced on a tape")
        leaves = self._tape.leaves()
        for leaf, grad in zip(leaves, self._tape.gradients(self, leaves)):
            leaf.grad = grad if leaf.grad is None else leaf.grad + grad

    def __repr__(self) -> str:
        label = f" '{self.name}'" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # arithmetic sugar
    def __add__(self, other):
        from shapeflow.nn import functional as F

        return F.add(self, other)

    def __sub__(self, other):
        from shapeflow.nn import functional as F

        return F.sub(self, other)

    def __mul__(self, other):
        from shapeflow.nn import functional as F

        return F.mul(self, other)

    __radd__ = __add__
    __rmul__ = __mul__


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


Backward = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class _Node:
    output: Tensor
    inputs: Tuple[Tensor, ...]
    backward: Backward


class Tape:
    """Ordered record of primitive operations with their saved intermediates."""

    def __init__(self):
        self.nodes: List[_Node] = []
        self._leaves: Dict[int, Tensor] = {}

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _stack().remove(self)

    def record(self, output: Tensor, inputs: Sequence[Tensor], backward: Backward):
        for t in inputs:
            if t.requires_grad and t._tape is None:
                self._leaves.setdefault(id(t), t)
        output._tape = self
        self.nodes.append(_Node(output, tuple(inputs), backward))

    def leaves(self) -> List[Tensor]:
        """Tracked leaf tensors in first-use order."""
        return list(self._leaves.values())

    def gradients(
        self,
        output: Tensor,
        wrt: Sequence[Tensor],
        seed: Optional[np.ndarray] = None,
    ) -> List[np.ndarray]:
        """
        Reverse pass from ``output``.

        Args:
            output: Tensor recorded on this tape (or a leaf)
            wrt: Tensors to differentiate with respect to
            seed: Output cotangent; ones when omitted

        Returns:
            One gradient array per entry of ``wrt`` (zeros when unreachable)
        """
        grads: Dict[int, np.ndarray] = {
            id(output): np.ones_like(output.values) if seed is None else np.asarray(seed, dtype=output.dtype)
        }
        wanted = {id(t) for t in wrt}
        for node in reversed(self.nodes):
            key = id(node.output)
            g = grads.get(key) if key in wanted else grads.pop(key, None)
            if g is None:
                continue
            for tensor, contribution in zip(node.inputs, node.backward(g)):
                if contribution is None or not tensor.tracked:
                    continue
                key = id(tensor)
                if key in grads:
                    grads[key] = grads[key] + contribution
                else:
                    grads[key] = contribution
        return [grads.get(id(t), np.zeros_like(t.values)) for t in wrt]


def active_tape() -> Optional[Tape]:
    stack = _stack()
    return stack[-1] if stack else None


def record(output: Tensor, inputs: Sequence[Tensor], backward: Backward) -> Tensor:
    """Attach ``output`` to the active tape if any input is tracked."""
    tape = active_tape()
    if tape is not None and any(t.tracked for t in inputs):
        tape.record(output, inputs, backward)
    return output
