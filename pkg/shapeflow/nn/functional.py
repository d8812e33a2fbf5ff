"""
Differentiable primitives.

Spatial tensors are laid out ``(N, C, D, H, W)`` where ``D, H, W`` follow
the grid axes x, y, z.
"""

from __future__ import annotations

import itertools
import math
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.special import erf, expit

from shapeflow.core.exceptions import ShapeMismatchError
from shapeflow.nn.tensor import Tensor, as_tensor, record

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# --- elementwise -----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.values + b.values)
    return record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.values - b.values)
    return record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.values * b.values)
    return record(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.values, a.shape), _unbroadcast(g * a.values, b.shape)),
    )


def sum_all(x: Tensor) -> Tensor:
    out = Tensor(np.sum(x.values))
    return record(out, (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def gelu(x: Tensor) -> Tensor:
    """Exact GELU ``x * Phi(x)``."""
    v = x.values
    cdf = 0.5 * (1.0 + erf(v / _SQRT2))
    out = Tensor(v * cdf)

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * v * v)
        return (g * (cdf + v * pdf),)

    return record(out, (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    s = expit(x.values)
    out = Tensor(s)
    return record(out, (x,), lambda g: (g * s * (1.0 - s),))


# --- convolution -------------------------------------------------------------

def conv3d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """
    Same-size 3D cross-correlation with zero padding ``k // 2``.

    Args:
        x: Input ``(N, C, D, H, W)``
        weight: Kernel ``(F, C, k, k, k)`` with odd ``k``
        bias: Optional ``(F,)``

    Returns:
        Output ``(N, F, D, H, W)``
    """
    if x.values.ndim != 5:
        raise ShapeMismatchError(f"conv3d expects a 5-D input, got shape {x.shape}")
    if weight.values.ndim != 5:
        raise ShapeMismatchError(f"conv3d expects a 5-D kernel, got shape {weight.shape}")
    n, c, d, h, w = x.shape
    f, wc, k, k1, k2 = weight.shape
    if wc != c:
        raise ShapeMismatchError(f"conv3d input has {c} channels but kernel expects {wc}")
    if not (k == k1 == k2) or k % 2 == 0:
        raise ShapeMismatchError(f"conv3d needs a cubic odd kernel, got {weight.shape[2:]}")
    if bias is not None and bias.shape != (f,):
        raise ShapeMismatchError(f"conv3d bias shape {bias.shape} does not match {f} filters")

    p = k // 2
    xp = np.pad(x.values, ((0, 0), (0, 0), (p, p), (p, p), (p, p)))
    wv = weight.values
    shifts = list(itertools.product(range(k), repeat=3))

    acc = np.zeros((f, n, d, h, w), dtype=x.dtype)
    for a, b, cc in shifts:
        patch = xp[:, :, a:a + d, b:b + h, cc:cc + w]
        acc += np.tensordot(wv[:, :, a, b, cc], patch, axes=([1], [1]))
    out_values = np.moveaxis(acc, 0, 1)
    if bias is not None:
        out_values = out_values + bias.values[None, :, None, None, None]
    out = Tensor(out_values)

    def backward(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(wv)
        for a, b, cc in shifts:
            patch = xp[:, :, a:a + d, b:b + h, cc:cc + w]
            # (N, D, H, W, C)
            contrib = np.tensordot(g, wv[:, :, a, b, cc], axes=([1], [0]))
            gxp[:, :, a:a + d, b:b + h, cc:cc + w] += np.moveaxis(contrib, -1, 1)
            gw[:, :, a, b, cc] = np.tensordot(g, patch, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
        gx = gxp[:, :, p:p + d, p:p + h, p:p + w]
        gb = g.sum(axis=(0, 2, 3, 4)) if bias is not None else None
        return (gx, gw, gb)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record(out, inputs, lambda g: backward(g)[: len(inputs)])


# --- resampling ----------------------------------------------------------------

def maxpool3d(x: Tensor) -> Tensor:
    """
    2x2x2 max pooling with stride 2.

    Ties route the gradient to the first window element in x-fastest order.
    """
    n, c, d, h, w = x.shape
    if d % 2 or h % 2 or w % 2:
        raise ShapeMismatchError(f"maxpool3d needs even spatial dims, got {x.shape[2:]}")
    blocks = x.values.reshape(n, c, d // 2, 2, h // 2, 2, w // 2, 2)
    # window offsets ordered (z, y, x) so that the flattened index runs x-fastest
    windows = blocks.transpose(0, 1, 2, 4, 6, 7, 5, 3).reshape(n, c, d // 2, h // 2, w // 2, 8)
    arg = np.argmax(windows, axis=-1)
    out = Tensor(np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0])

    def backward(g):
        routed = np.zeros(windows.shape, dtype=g.dtype)
        np.put_along_axis(routed, arg[..., None], g[..., None], axis=-1)
        routed = routed.reshape(n, c, d // 2, h // 2, w // 2, 2, 2, 2)
        return (routed.transpose(0, 1, 2, 7, 3, 6, 4, 5).reshape(x.shape),)

    return record(out, (x,), backward)


def upsample2(x: Tensor) -> Tensor:
    """Nearest-neighbor upsampling by 2 along each spatial axis."""
    v = x.values
    out = Tensor(v.repeat(2, axis=2).repeat(2, axis=3).repeat(2, axis=4))
    n, c, d, h, w = x.shape

    def backward(g):
        return (g.reshape(n, c, d, 2, h, 2, w, 2).sum(axis=(3, 5, 7)),)

    return record(out, (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.values for t in tensors], axis=axis))
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return record(out, tuple(tensors), backward)


# --- normalization -------------------------------------------------------------

def layer_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    axes: Tuple[int, ...] = (1,),
    eps: float = 1e-5,
) -> Tensor:
    """
    Normalize over ``axes`` to zero mean and unit variance, then scale and shift.

    ``gamma`` and ``beta`` are shaped like the normalized axes (``(C,)`` for
    the default channel normalization).
    """
    v = x.values
    param_shape = [1] * v.ndim
    for axis in axes:
        param_shape[axis] = v.shape[axis]
    if gamma.values.size != int(np.prod([v.shape[a] for a in axes])):
        raise ShapeMismatchError(
            f"layer_norm scale has {gamma.values.size} entries for normalized shape "
            f"{tuple(v.shape[a] for a in axes)}"
        )
    g_b = gamma.values.reshape(param_shape)
    b_b = beta.values.reshape(param_shape)

    mean = v.mean(axis=axes, keepdims=True)
    centered = v - mean
    var = (centered * centered).mean(axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = Tensor(xhat * g_b + b_b)
    other = tuple(a for a in range(v.ndim) if a not in axes)

    def backward(g):
        gxhat = g * g_b
        gx = inv_std * (
            gxhat
            - gxhat.mean(axis=axes, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=axes, keepdims=True)
        )
        ggamma = (g * xhat).sum(axis=other).reshape(gamma.shape)
        gbeta = g.sum(axis=other).reshape(beta.shape)
        return (gx, ggamma, gbeta)

    return record(out, (x, gamma, beta), backward)


# --- losses ----------------------------------------------------------------------

def mse(pred: Tensor, target) -> Tensor:
    """Mean squared error over all elements."""
    target = target.values if isinstance(target, Tensor) else np.asarray(target)
    if pred.shape != target.shape:
        raise ShapeMismatchError(f"mse shapes differ: {pred.shape} vs {target.shape}")
    diff = pred.values - target
    out = Tensor(np.mean(diff * diff))
    n = diff.size
    return record(out, (pred,), lambda g: (g * 2.0 * diff / n,))
