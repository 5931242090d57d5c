"""Binary tensor archive shared by adapter files and model checkpoints.

Layout: 4-byte magic, u32 version, u64 metadata length, UTF-8 JSON
metadata, then raw little-endian float32 payloads in manifest order.
The metadata carries a `tensors` manifest of names, shapes, and offsets
relative to the payload start.  Round trips are bit-exact.
"""

import io
import json
import struct

import numpy as np

from .errors import DataError
from .utils import atomic_write_bytes

MAGIC_ADAPTER = b"DADP"
MAGIC_MODEL = b"DMDL"
VERSION = 1

_HEADER = struct.Struct("<4sIQ")


def write_archive(path: str, magic: bytes, metadata: dict, tensors: dict) -> None:
    """Write atomically; tensor insertion order fixes payload order."""
    manifest = []
    offset = 0
    blobs = []
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        raw = arr.tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += len(raw)
        blobs.append(raw)
    meta = dict(metadata)
    meta["tensors"] = manifest
    meta_raw = json.dumps(meta, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(_HEADER.pack(magic, VERSION, len(meta_raw)))
    buf.write(meta_raw)
    for raw in blobs:
        buf.write(raw)
    atomic_write_bytes(path, buf.getvalue())


def read_archive(path: str, magic: bytes):
    """Return (metadata, {name: float32 array}); malformed file -> DataError."""
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from None
    if len(data) < _HEADER.size:
        raise DataError(f"{path}: truncated header")
    got_magic, version, meta_len = _HEADER.unpack_from(data, 0)
    if got_magic != magic:
        raise DataError(
            f"{path}: bad magic {got_magic!r}, expected {magic.decode()}"
        )
    if version != VERSION:
        raise DataError(f"{path}: unsupported version {version}")
    meta_end = _HEADER.size + meta_len
    if len(data) < meta_end:
        raise DataError(f"{path}: truncated metadata")
    try:
        metadata = json.loads(data[_HEADER.size : meta_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DataError(f"{path}: corrupt metadata: {e}") from None
    manifest = metadata.get("tensors")
    if not isinstance(manifest, list):
        raise DataError(f"{path}: metadata lacks a tensor manifest")
    tensors = {}
    for entry in manifest:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = meta_end + entry["offset"]
        end = start + count * 4
        if end > len(data):
            raise DataError(f"{path}: truncated payload for tensor {entry['name']!r}")
        arr = np.frombuffer(data[start:end], dtype="<f4").reshape(shape)
        tensors[entry["name"]] = arr.astype(np.float32, copy=True)
    return metadata, tensors
