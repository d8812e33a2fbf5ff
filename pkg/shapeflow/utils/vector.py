"""Vector similarity utilities for field statistics."""

from typing import Tuple

import numpy as np


def cosine_similarity(vec1: np.ndarray, vec2: np.ndarray) -> Tuple[float, bool]:
    """
    Calculate cosine similarity between two vectors.

    Args:
        vec1: First vector (any shape, flattened)
        vec2: Second vector with the same number of elements

    Returns:
        Tuple of (similarity in [-1, 1], degenerate). ``degenerate`` is True
        when either vector has zero norm, in which case similarity is 0.0
    """
    a = np.asarray(vec1, dtype=np.float64).ravel()
    b = np.asarray(vec2, dtype=np.float64).ravel()

    if a.size != b.size:
        raise ValueError(f"Vector dimensions must match: {a.size} vs {b.size}")
    if a.size == 0:
        return 0.0, True

    norm_a = np.linalg.norm(a)
    norm_b = np.linalg.norm(b)

    if norm_a == 0 or norm_b == 0:
        return 0.0, True

    similarity = np.dot(a / norm_a, b / norm_b)

    # Ensure result is in valid range due to floating point errors
    return float(np.clip(similarity, -1.0, 1.0)), False


def pearson_correlation(vec1: np.ndarray, vec2: np.ndarray) -> Tuple[float, bool]:
    """
    Pearson correlation as the cosine similarity of mean-centered vectors.

    Returns:
        Tuple of (correlation, degenerate); a zero-variance series yields
        ``(0.0, True)``
    """
    a = np.asarray(vec1, dtype=np.float64).ravel()
    b = np.asarray(vec2, dtype=np.float64).ravel()
    if a.size != b.size:
        raise ValueError(f"Vector dimensions must match: {a.size} vs {b.size}")
    if a.size < 2 or np.ptp(a) == 0 or np.ptp(b) == 0:
        return 0.0, True
    return cosine_similarity(a - a.mean(), b - b.mean())
