"""
UNW1 checkpoint codec.

Layout::

    b"UNW1"                      magic
    uint32 LE                    manifest length in bytes
    manifest                     UTF-8 JSON: {"format", "version", "config", "tensors"}
    blob                         little-endian float32 values

Each ``tensors`` entry holds ``name``, ``shape``, ``offset`` (bytes into the
blob) and ``count``.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any, Dict, Mapping, Tuple, Union

import numpy as np
import structlog

from shapeflow.core.exceptions import CheckpointError

logger = structlog.get_logger()

MAGIC = b"UNW1"
VERSION = 1

PathLike = Union[str, Path]


def encode_checkpoint(state: Mapping[str, np.ndarray], config: Mapping[str, Any]) -> bytes:
    entries = []
    chunks = []
    offset = 0
    for name, values in state.items():
        data = np.ascontiguousarray(values, dtype="<f4").tobytes()
        entries.append(
            {"name": name, "shape": list(np.shape(values)), "offset": offset, "count": int(np.size(values))}
        )
        chunks.append(data)
        offset += len(data)
    manifest = json.dumps(
        {"format": "UNW1", "version": VERSION, "config": dict(config), "tensors": entries},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    return MAGIC + struct.pack("<I", len(manifest)) + manifest + b"".join(chunks)


def decode_checkpoint(data: bytes, path: str = "") -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    """
    Parse a UNW1 buffer into (config, name -> float32 array).

    Raises:
        CheckpointError: Bad magic, truncated data or inconsistent offsets
    """
    if data[:4] != MAGIC:
        raise CheckpointError(f"Bad checkpoint magic {data[:4]!r}", path, 0)
    if len(data) < 8:
        raise CheckpointError("Truncated checkpoint header", path, len(data))
    (length,) = struct.unpack("<I", data[4:8])
    start = 8 + length
    if len(data) < start:
        raise CheckpointError("Truncated checkpoint manifest", path, len(data))
    try:
        manifest = json.loads(data[8:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"Unreadable checkpoint manifest: {e}", path, 8) from e
    if manifest.get("version") != VERSION:
        raise CheckpointError(f"Unsupported checkpoint version {manifest.get('version')}", path, 8)

    blob = data[start:]
    state: Dict[str, np.ndarray] = {}
    for entry in manifest["tensors"]:
        begin = int(entry["offset"])
        end = begin + 4 * int(entry["count"])
        if end > len(blob):
            raise CheckpointError(f"Tensor {entry['name']} runs past the blob end", path, start + begin)
        values = np.frombuffer(blob[begin:end], dtype="<f4").reshape(entry["shape"])
        state[entry["name"]] = values.astype(np.float32)
    return manifest["config"], state


def save_checkpoint(path: PathLike, state: Mapping[str, np.ndarray], config: Mapping[str, Any]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(state, config))
    logger.debug("Checkpoint written", path=str(path), tensors=len(state))
    return path


def load_checkpoint(path: PathLike) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"Cannot read checkpoint: {e}", str(path)) from e
    return decode_checkpoint(data, str(path))
