"""
Surface extraction from SDF grids.

Marching cubes runs through scikit-image with the classic Lorensen table
and linear edge interpolation; vertices are shared across neighboring
cubes. Meshes are written and read back with trimesh.
"""

from __future__ import annotations

from pathlib import Path
from typing import Tuple, Union

import numpy as np
import scipy.sparse as sp
import structlog
import trimesh
from skimage import measure

from shapeflow.core.exceptions import MeshError
from shapeflow.models.fields import ScalarField3
from shapeflow.models.mesh import TriMesh

logger = structlog.get_logger()

PathLike = Union[str, Path]

MESH_FORMATS = ("obj", "stl")
OBJ_DIGITS = 9
STL_HEADER_BYTES = 84
STL_RECORD_BYTES = 50


def _check_boundary(values: np.ndarray, iso: float):
    faces = [
        values[0], values[-1],
        values[:, 0], values[:, -1],
        values[:, :, 0], values[:, :, -1],
    ]
    for face in faces:
        if np.any(face < iso):
            raise MeshError("Isosurface intersects the grid boundary")


def _signed_volume(vertices: np.ndarray, faces: np.ndarray) -> float:
    v = vertices[faces]
    return float(np.einsum("ij,ij->i", v[:, 0], np.cross(v[:, 1], v[:, 2])).sum() / 6.0)


def marching_cubes(field: ScalarField3, iso: float = 0.0) -> TriMesh:
    """
    Extract the ``iso`` level set as an indexed triangle mesh.

    Normals point toward values above ``iso``.

    Raises:
        MeshError: If the field is not finite or the isosurface reaches the grid boundary
    """
    values = np.asarray(field.values, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise MeshError("Field contains non-finite values")
    _check_boundary(values, iso)
    if not np.any(values < iso):
        return TriMesh.empty()

    verts, faces, _, _ = measure.marching_cubes(
        values,
        level=iso,
        spacing=tuple(float(s) for s in field.spec.spacing),
        method="lorensen",
        allow_degenerate=True,
    )
    faces = np.asarray(faces, dtype=np.int64)
    vertices = np.asarray(verts, dtype=np.float64) + np.asarray(field.spec.origin, dtype=np.float64)
    # bodies are closed, so outward winding encloses positive volume
    if _signed_volume(vertices, faces) < 0.0:
        faces = faces[:, ::-1]

    mesh = TriMesh(vertices, faces)
    logger.debug(
        "Surface extracted",
        vertices=mesh.num_vertices,
        triangles=mesh.num_triangles,
        iso=iso,
    )
    return mesh


def laplacian_smooth(mesh: TriMesh, iterations: int = 10, lam: float = 0.5) -> TriMesh:
    """
    Umbrella-operator smoothing.

    Args:
        mesh: Input mesh
        iterations: Number of passes; 0 returns the mesh unchanged
        lam: Step toward the 1-ring centroid, in (0, 1]

    Returns:
        Mesh with moved vertices and identical connectivity
    """
    if iterations < 0:
        raise ValueError(f"iterations must be >= 0, got {iterations}")
    if not 0.0 < lam <= 1.0:
        raise ValueError(f"lam must be in (0, 1], got {lam}")
    if iterations == 0 or mesh.is_empty():
        return mesh

    edges = mesh.unique_edges()
    n = mesh.num_vertices
    rows = np.concatenate([edges[:, 0], edges[:, 1]])
    cols = np.concatenate([edges[:, 1], edges[:, 0]])
    adjacency = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    degree = np.asarray(adjacency.sum(axis=1)).ravel()
    has_ring = degree > 0
    inv_degree = np.where(has_ring, 1.0 / np.where(has_ring, degree, 1.0), 0.0)

    v = np.array(mesh.vertices, dtype=np.float64)
    for _ in range(iterations):
        centroid = (adjacency @ v) * inv_degree[:, None]
        v = v + lam * np.where(has_ring[:, None], centroid - v, 0.0)
    return TriMesh(v, mesh.triangles)


# --- export ----------------------------------------------------------------


def _to_trimesh(mesh: TriMesh) -> trimesh.Trimesh:
    return trimesh.Trimesh(vertices=mesh.vertices, faces=mesh.triangles, process=False)


def _empty_payload(fmt: str) -> bytes:
    if fmt == "obj":
        return b"# shapeflow surface mesh\n"
    header = np.zeros(STL_HEADER_BYTES, dtype=np.uint8)
    return header.tobytes()


def export_mesh(mesh: TriMesh, path: PathLike, fmt: str = "obj") -> Path:
    """Write ``mesh`` as OBJ (9 decimals) or binary little-endian STL."""
    if fmt not in MESH_FORMATS:
        raise ValueError(f"Unknown mesh format '{fmt}'")
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        if mesh.is_empty():
            path.write_bytes(_empty_payload(fmt))
        elif fmt == "obj":
            _to_trimesh(mesh).export(
                str(path), file_type="obj", digits=OBJ_DIGITS, include_normals=False
            )
        else:
            _to_trimesh(mesh).export(str(path), file_type="stl")
    except OSError as e:
        raise MeshError(f"Cannot write mesh to {path}: {e}") from e
    logger.info("Mesh exported", path=str(path), format=fmt, triangles=mesh.num_triangles)
    return path


def _load(path: PathLike, fmt: str, **kwargs) -> trimesh.Trimesh:
    path = Path(path)
    if not path.is_file():
        raise MeshError(f"Cannot read mesh {path}: no such file")
    try:
        loaded = trimesh.load(str(path), file_type=fmt, process=False, force="mesh", **kwargs)
    except Exception as e:
        raise MeshError(f"Cannot parse {fmt.upper()} mesh {path}: {e}") from e
    if not isinstance(loaded, trimesh.Trimesh):
        raise MeshError(f"{path} does not hold a single triangle mesh")
    return loaded


def read_obj(path: PathLike) -> TriMesh:
    loaded = _load(path, "obj", maintain_order=True)
    return TriMesh(np.asarray(loaded.vertices), np.asarray(loaded.faces, dtype=np.int64))


def _stl_facet_count(path: PathLike) -> int:
    path = Path(path)
    try:
        size = path.stat().st_size
        header = np.fromfile(path, dtype=np.uint8, count=STL_HEADER_BYTES)
    except OSError as e:
        raise MeshError(f"Cannot read mesh {path}: {e}") from e
    if size < STL_HEADER_BYTES:
        raise MeshError(f"Truncated STL header in {path}")
    count = int(header[80:84].view("<u4")[0])
    if size != STL_HEADER_BYTES + STL_RECORD_BYTES * count:
        raise MeshError(
            f"STL {path} declares {count} facets but has {size - STL_HEADER_BYTES} payload bytes"
        )
    return count


def read_stl(path: PathLike) -> Tuple[np.ndarray, np.ndarray]:
    """Facet normals ``(F, 3)`` and corner positions ``(F, 3, 3)`` of a binary STL."""
    if _stl_facet_count(path) == 0:
        return np.zeros((0, 3)), np.zeros((0, 3, 3))
    loaded = _load(path, "stl")
    return np.asarray(loaded.face_normals, dtype=np.float64), np.asarray(
        loaded.triangles, dtype=np.float64
    )
