"""Minimal reverse-mode tensor engine for the flow surrogate."""

from shapeflow.nn.tensor import Tape, Tensor, precision

__all__ = ["Tape", "Tensor", "precision"]
