"""
File helpers: atomic writes and content hashes
"""

import hashlib
import json
import os
import tempfile
from pathlib import Path
from typing import Any, Dict, Union

PathLike = Union[str, Path]


def atomic_write_bytes(path: PathLike, data: bytes) -> None:
    """Write ``data`` to a temp file beside ``path`` and rename it into place"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=str(path.parent))
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(data)
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise


def atomic_write_text(path: PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def write_manifest(output: PathLike, payload: Dict[str, Any]) -> Path:
    """Write ``<output>.json`` next to an output file"""
    output = Path(output)
    manifest = output.with_name(output.name + ".json")
    atomic_write_text(manifest, json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return manifest


def blob_hash(data: bytes) -> str:
    """Content hash computed the way git hashes blobs"""
    digest = hashlib.sha1()
    digest.update(f"blob {len(data)}\0".encode("ascii"))
    digest.update(data)
    return digest.hexdigest()


def file_hash(path: PathLike) -> str:
    return blob_hash(Path(path).read_bytes())
