"""Indexed triangle mesh."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True, eq=False)
class TriMesh:
    """Vertices ``(V, 3)`` and triangles ``(F, 3)`` of vertex indices."""

    vertices: np.ndarray = field(repr=False)
    triangles: np.ndarray = field(repr=False)

    def __post_init__(self):
        vertices = np.array(self.vertices, dtype=np.float64, copy=True).reshape(-1, 3)
        triangles = np.array(self.triangles, dtype=np.int64, copy=True).reshape(-1, 3)
        if triangles.size:
            if triangles.min() < 0 or triangles.max() >= len(vertices):
                raise ValueError("Triangle index out of range")
            t = triangles
            if np.any((t[:, 0] == t[:, 1]) | (t[:, 1] == t[:, 2]) | (t[:, 0] == t[:, 2])):
                raise ValueError("Degenerate triangle with repeated vertex index")
        vertices.setflags(write=False)
        triangles.setflags(write=False)
        object.__setattr__(self, "vertices", vertices)
        object.__setattr__(self, "triangles", triangles)

    @classmethod
    def empty(cls) -> "TriMesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    @property
    def num_vertices(self) -> int:
        return len(self.vertices)

    @property
    def num_triangles(self) -> int:
        return len(self.triangles)

    def is_empty(self) -> bool:
        return self.num_triangles == 0

    def edges(self) -> np.ndarray:
        """Directed half-edges ``(3F, 2)`` in triangle winding order."""
        t = self.triangles
        return np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]], axis=0)

    def unique_edges(self) -> np.ndarray:
        e = np.sort(self.edges(), axis=1)
        return np.unique(e, axis=0) if len(e) else e

    def euler_characteristic(self) -> int:
        return self.num_vertices - len(self.unique_edges()) + self.num_triangles

    def is_watertight(self) -> bool:
        """Every undirected edge is shared by exactly two triangles."""
        if self.is_empty():
            return True
        e = np.sort(self.edges(), axis=1)
        _, counts = np.unique(e, axis=0, return_counts=True)
        return bool(np.all(counts == 2))

    def is_consistently_oriented(self) -> bool:
        """Every directed half-edge appears once and its twin once."""
        if self.is_empty():
            return True
        e = self.edges()
        _, counts = np.unique(e, axis=0, return_counts=True)
        if np.any(counts != 1):
            return False
        forward = {tuple(x) for x in e.tolist()}
        return all((b, a) in forward for a, b in forward)

    def face_normals(self) -> np.ndarray:
        """Unit facet normals (zero for zero-area facets)."""
        v = self.vertices
        t = self.triangles
        n = np.cross(v[t[:, 1]] - v[t[:, 0]], v[t[:, 2]] - v[t[:, 0]])
        norm = np.linalg.norm(n, axis=1, keepdims=True)
        return np.divide(n, norm, out=np.zeros_like(n), where=norm > 0)

    def area(self) -> float:
        v = self.vertices
        t = self.triangles
        if not len(t):
            return 0.0
        n = np.cross(v[t[:, 1]] - v[t[:, 0]], v[t[:, 2]] - v[t[:, 0]])
        return float(0.5 * np.linalg.norm(n, axis=1).sum())
