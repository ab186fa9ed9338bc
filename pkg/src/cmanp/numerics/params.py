"""Walking nested parameter containers (dataclasses, lists) by dotted name."""

from __future__ import annotations

import hashlib
from dataclasses import fields, is_dataclass

import numpy as np

from .tensor import Tensor


def named_tensors(obj, prefix: str = ""):
    """Yield ``(dotted_name, tensor)`` for every tensor inside nested dataclasses/lists."""
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif is_dataclass(obj):
        for f in fields(obj):
            yield from named_tensors(getattr(obj, f.name), f"{prefix}.{f.name}" if prefix else f.name)
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from named_tensors(item, f"{prefix}.{i}" if prefix else str(i))


def fingerprint(obj) -> bytes:
    h = hashlib.blake2b(digest_size=16)
    for name, t in named_tensors(obj):
        h.update(name.encode())
        h.update(str(t.shape).encode())
        h.update(np.ascontiguousarray(t.data).tobytes())
    return h.digest()
