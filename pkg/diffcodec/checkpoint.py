"""
Parameter checkpoint files

Layout (little-endian):
    magic "DCKP" | version u16 | metadata length u32 | metadata UTF-8 |
    tensor count u32 | per tensor: name length u16, name UTF-8, ndim u8,
    dims u32 * ndim, float64 data (row-major)
"""

import logging
import struct
from pathlib import Path
from typing import Dict, Tuple, Union

import numpy as np

from .errors import ModelMismatchError
from .fsutil import atomic_write_bytes

logger = logging.getLogger(__name__)

MAGIC = b"DCKP"
VERSION = 1


def dumps(state: Dict[str, np.ndarray], metadata: str = "") -> bytes:
    meta = metadata.encode("utf-8")
    parts = [MAGIC, struct.pack("<HI", VERSION, len(meta)), meta, struct.pack("<I", len(state))]
    for name, array in state.items():
        array = np.ascontiguousarray(array, dtype="<f8")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<B", array.ndim))
        parts.append(struct.pack(f"<{array.ndim}I", *array.shape))
        parts.append(array.tobytes())
    return b"".join(parts)


def loads(blob: bytes, source: str = "<bytes>") -> Tuple[Dict[str, np.ndarray], str]:
    """Parse a checkpoint into (state, metadata)"""
    view = memoryview(blob)
    offset = 0

    def take(size: int) -> memoryview:
        nonlocal offset
        if offset + size > len(view):
            raise ModelMismatchError(f"{source}: truncated checkpoint")
        chunk = view[offset:offset + size]
        offset += size
        return chunk

    if bytes(take(4)) != MAGIC:
        raise ModelMismatchError(f"{source}: not a checkpoint file")
    version, meta_len = struct.unpack("<HI", take(6))
    if version != VERSION:
        raise ModelMismatchError(f"{source}: unsupported checkpoint version {version}")
    metadata = bytes(take(meta_len)).decode("utf-8")
    (count,) = struct.unpack("<I", take(4))
    state: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = bytes(take(name_len)).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(dims)) if ndim else 1
        data = np.frombuffer(take(8 * size), dtype="<f8").astype(np.float64)
        state[name] = data.reshape(dims)
    if offset != len(view):
        raise ModelMismatchError(f"{source}: trailing bytes after last tensor")
    return state, metadata


def save_checkpoint(path: Union[str, Path], state: Dict[str, np.ndarray], metadata: str = "") -> Path:
    path = Path(path)
    atomic_write_bytes(path, dumps(state, metadata))
    logger.info("wrote checkpoint %s (%d tensors)", path, len(state))
    return path


def load_checkpoint(path: Union[str, Path]) -> Tuple[Dict[str, np.ndarray], str]:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise ModelMismatchError(f"{path}: cannot read checkpoint ({exc})") from exc
    return loads(blob, source=str(path))


def split_state(state: Dict[str, np.ndarray], prefix: str) -> Dict[str, np.ndarray]:
    """Sub-dictionary of entries under ``prefix.`` with the prefix removed"""
    head = prefix + "."
    return {name[len(head):]: value for name, value in state.items() if name.startswith(head)}


def merge_states(**groups: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
    merged: Dict[str, np.ndarray] = {}
    for prefix, group in groups.items():
        for name, value in group.items():
            merged[f"{prefix}.{name}"] = value
    return merged
