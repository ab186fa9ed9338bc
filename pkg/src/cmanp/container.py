"""Flat binary tensor container shared by checkpoints and task dumps.

Layout::

    magic (8 bytes) | version u32 | header length u64 | header (UTF-8 JSON)
    | tensor blob (little-endian float64) | blake2b-256 of everything before it

The header holds caller metadata plus a manifest of ``{name, shape, offset}``
entries; offsets count float64 elements from the start of the blob.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"CMANPBIN"
FORMAT_VERSION = 1
_DIGEST = 32
_PREFIX = struct.Struct("<8sIQ")


class ContainerError(ValueError):
    """File is not a valid container (bad magic, truncation, checksum)."""


class VersionError(ContainerError):
    pass


def _digest(buf: bytes) -> bytes:
    return hashlib.blake2b(buf, digest_size=_DIGEST).digest()


def write_container(path, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    """Write ``arrays`` (name -> float array) and JSON-able ``meta`` atomically."""
    manifest, offset, blobs = [], 0, []
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f8")
        manifest.append({"name": name, "shape": list(a.shape), "offset": offset})
        offset += a.size
        blobs.append(a.tobytes())
    header = json.dumps({"meta": meta, "manifest": manifest}, sort_keys=True).encode()
    body = _PREFIX.pack(MAGIC, FORMAT_VERSION, len(header)) + header + b"".join(blobs)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(body)
        fh.write(_digest(body))
    os.replace(tmp, path)


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if len(raw) < _PREFIX.size + _DIGEST:
        raise ContainerError(f"{path}: file is truncated ({len(raw)} bytes)")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise ContainerError(f"{path}: not a cmanp container (bad magic)")
    if version != FORMAT_VERSION:
        raise VersionError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    body, digest = raw[:-_DIGEST], raw[-_DIGEST:]
    if _digest(body) != digest:
        raise ContainerError(f"{path}: checksum mismatch, file is corrupt or truncated")
    start = _PREFIX.size
    header = json.loads(body[start:start + hlen])
    blob = np.frombuffer(body, dtype="<f8", offset=start + hlen)
    arrays = {}
    for entry in header["manifest"]:
        n = int(np.prod(entry["shape"], dtype=np.int64))
        arrays[entry["name"]] = blob[entry["offset"]:entry["offset"] + n].reshape(entry["shape"]).astype(np.float64)
    return header["meta"], arrays
