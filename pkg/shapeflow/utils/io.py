"""
File formats: DSF1 field files, VTK legacy structured points, CSV tables.

DSF1 layout: one ASCII header line
``DSF1 <kind> <nx> <ny> <nz> <ox> <oy> <oz> <sx> <sy> <sz>`` terminated by
``\\n``, followed by little-endian float32 values in x-fastest node order
(three per node for ``vector`` kind).
"""

from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Sequence, Union

import numpy as np
import pandas as pd
import structlog

from shapeflow.core.exceptions import DatasetFormatError
from shapeflow.models.fields import Field3, GridSpec, ScalarField3, VectorField3

logger = structlog.get_logger()

DSF_MAGIC = "DSF1"
DSF_KINDS = {"scalar": 1, "vector": 3}

PathLike = Union[str, Path]


def fmt17(value: float) -> str:
    """Format a real with 17 significant digits."""
    return f"{float(value):.17g}"


# --- DSF1 ---------------------------------------------------------------

def encode_field(field: Field3) -> bytes:
    spec = field.spec
    header = " ".join(
        [DSF_MAGIC, field.kind]
        + [str(d) for d in spec.dims]
        + [repr(float(v)) for v in spec.origin]
        + [repr(float(v)) for v in spec.spacing]
    )
    payload = field.flat().astype("<f4").tobytes()
    return header.encode("ascii") + b"\n" + payload


def write_field(path: PathLike, field: Field3) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_field(field))
    return path


def decode_field(data: bytes, path: str = "") -> Field3:
    """
    Parse a DSF1 buffer.

    Raises:
        DatasetFormatError: With the byte offset of the offending token
    """
    newline = data.find(b"\n")
    if newline < 0:
        raise DatasetFormatError("DSF1 header is not newline-terminated", path, len(data))

    header = data[:newline]
    tokens: List[tuple] = []
    offset = 0
    for raw in header.split(b" "):
        tokens.append((raw, offset))
        offset += len(raw) + 1

    if len(tokens) != 11:
        raise DatasetFormatError(
            f"DSF1 header has {len(tokens)} tokens, expected 11", path, 0
        )
    magic, kind_tok = tokens[0], tokens[1]
    if magic[0] != DSF_MAGIC.encode():
        raise DatasetFormatError(f"Bad magic {magic[0]!r}", path, magic[1])
    kind = kind_tok[0].decode("ascii", errors="replace")
    if kind not in DSF_KINDS:
        raise DatasetFormatError(f"Unknown field kind {kind!r}", path, kind_tok[1])

    dims = []
    for raw, off in tokens[2:5]:
        try:
            value = int(raw)
        except ValueError:
            raise DatasetFormatError(f"Bad dimension token {raw!r}", path, off) from None
        if value < 2:
            raise DatasetFormatError(f"Dimension {value} must be >= 2", path, off)
        dims.append(value)

    reals = []
    for raw, off in tokens[5:]:
        try:
            reals.append(float(raw))
        except ValueError:
            raise DatasetFormatError(f"Bad real token {raw!r}", path, off) from None
    if any(not s > 0 for s in reals[3:]):
        raise DatasetFormatError("Spacing must be positive", path, tokens[8][1])

    spec = GridSpec(origin=tuple(reals[:3]), spacing=tuple(reals[3:]), dims=tuple(dims))
    ncomp = DSF_KINDS[kind]
    expected = spec.num_nodes * ncomp * 4
    payload = data[newline + 1:]
    if len(payload) != expected:
        raise DatasetFormatError(
            f"Payload has {len(payload)} bytes, expected {expected}",
            path,
            newline + 1 + min(len(payload), expected),
        )
    flat = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    if kind == "scalar":
        return ScalarField3.from_flat(spec, flat)
    return VectorField3.from_flat(spec, flat)


def read_field(path: PathLike) -> Field3:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise DatasetFormatError(f"Cannot read field file: {e}", str(path)) from e
    return decode_field(data, str(path))


# --- VTK ------------------------------------------------------------------

def write_vtk(path: PathLike, fields: Mapping[str, Field3], title: str = "shapeflow") -> Path:
    """Write fields sharing one grid as VTK legacy ASCII STRUCTURED_POINTS."""
    if not fields:
        raise ValueError("No fields to export")
    specs = {f.spec for f in fields.values()}
    if len(specs) != 1:
        raise ValueError("All exported fields must share one grid")
    spec = next(iter(specs))

    lines = [
        "# vtk DataFile Version 3.0",
        title,
        "ASCII",
        "DATASET STRUCTURED_POINTS",
        "DIMENSIONS %d %d %d" % spec.dims,
        "ORIGIN %.9g %.9g %.9g" % spec.origin,
        "SPACING %.9g %.9g %.9g" % spec.spacing,
        f"POINT_DATA {spec.num_nodes}",
    ]
    for name, field in fields.items():
        flat = field.flat()
        if field.kind == "scalar":
            lines.append(f"SCALARS {name} float 1")
            lines.append("LOOKUP_TABLE default")
            lines.extend("%.9g" % v for v in flat)
        else:
            lines.append(f"VECTORS {name} float")
            lines.extend("%.9g %.9g %.9g" % tuple(v) for v in flat.reshape(-1, 3))

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n", encoding="ascii")
    logger.debug("VTK written", path=str(path), fields=list(fields))
    return path


# --- CSV ------------------------------------------------------------------

def write_table(path: PathLike, rows: Iterable[Dict[str, object]], columns: Sequence[str]) -> Path:
    """Write rows of preformatted values as CSV with a fixed column order."""
    frame = pd.DataFrame(list(rows), columns=list(columns))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, lineterminator="\n")
    return path


def read_table(path: PathLike) -> pd.DataFrame:
    """Read a CSV with every cell kept as text; callers parse what they need."""
    return pd.read_csv(path, dtype=str, keep_default_na=False)
