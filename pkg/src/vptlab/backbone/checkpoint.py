"""Binary checkpoint format.

Layout::

    b"VPTC"                      magic
    uint32 LE                    format version
    uint32 LE                    header length in bytes
    header                       UTF-8 JSON: {"meta": {...}, "tensors": {name: {"shape": [...], "offset": int}}}
    payload                      little-endian float32 tensors, concatenated in header order

Offsets are relative to the start of the payload. The header is serialized
with sorted keys so that save -> load -> save is byte-identical.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from vptlab.errors import DataError

MAGIC = b"VPTC"
VERSION = 1


def dumps(tensors: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    entries = {}
    chunks = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(np.asarray(tensors[name], dtype="<f4"))
        entries[name] = {"shape": list(arr.shape), "offset": offset}
        raw = arr.tobytes()
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta or {}, "tensors": entries}, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<II", VERSION, len(header)) + header + b"".join(chunks)


def loads(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if blob[:4] != MAGIC:
        raise DataError("not a checkpoint: bad magic bytes")
    version, hlen = struct.unpack("<II", blob[4:12])
    if version != VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    header = json.loads(blob[12 : 12 + hlen].decode("utf-8"))
    payload = memoryview(blob)[12 + hlen :]
    tensors = {}
    for name, entry in header["tensors"].items():
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + 4 * count
        if end > len(payload):
            raise DataError(f"checkpoint truncated inside tensor {name!r}")
        tensors[name] = np.frombuffer(payload[start:end], dtype="<f4").reshape(shape).astype(np.float32)
    return tensors, header["meta"]


def save(path: str | Path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> str:
    """Write atomically; returns the SHA-256 of the file contents."""
    path = Path(path)
    blob = dumps(tensors, meta)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(blob)
    tmp.replace(path)
    return hashlib.sha256(blob).hexdigest()


def load(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    return loads(Path(path).read_bytes())


def file_hash(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
