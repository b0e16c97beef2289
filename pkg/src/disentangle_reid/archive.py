"""Single-file array container.

Layout::

    b"DRARCH01" | uint64 LE header length | UTF-8 JSON header | float32 LE blob

The header holds ``{"arrays": [{"name", "shape", "offset"}], "meta": {...}}``;
``offset`` is a byte offset into the blob.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from ._validation import ValidationError

MAGIC = b"DRARCH01"
_F32 = np.dtype("<f4")


class ArchiveError(ValidationError):
    pass


def save_arrays(path, arrays: Mapping[str, np.ndarray], meta: Mapping | None = None) -> None:
    entries = []
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        data = np.ascontiguousarray(np.asarray(arr, dtype=_F32))
        if not np.isfinite(data).all():
            raise ArchiveError(f"array {name!r} has non-finite values")
        entries.append({"name": name, "shape": list(data.shape), "offset": offset})
        raw = data.tobytes()
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"arrays": entries, "meta": dict(meta or {})}, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in chunks:
            fh.write(raw)
    os.replace(tmp, path)


def load_arrays(path):
    """Return ``(arrays, meta)``; arrays come back as float32 numpy arrays."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != MAGIC:
        raise ArchiveError(f"{path}: not an array archive (bad magic)")
    if len(blob) < 16:
        raise ArchiveError(f"{path}: truncated header")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    try:
        header = json.loads(blob[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ArchiveError(f"{path}: corrupt header: {exc}") from exc
    data = memoryview(blob)[16 + hlen :]
    arrays = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        stop = start + count * 4
        if stop > len(data):
            raise ArchiveError(f"{path}: array {entry['name']!r} runs past end of file")
        arrays[entry["name"]] = np.frombuffer(data[start:stop], dtype=_F32).reshape(shape).copy()
    return arrays, header.get("meta", {})
