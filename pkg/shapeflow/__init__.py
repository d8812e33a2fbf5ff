"""shapeflow - differentiable surrogate-based shape optimization toolkit."""

__version__ = "1.0.0"
__author__ = "shapeflow developers"
