"""Scratch-memory and multiply-add accounting.

Counters are scoped: ``with track() as t`` makes ``t`` observe every tensor
allocated and every op executed until the block exits.  Bytes are charged when
a :class:`~cmanp.numerics.tensor.Tensor` is created inside the scope and
credited back when that tensor is freed, so ``t.peak_bytes`` is the high-water
mark of live tensor storage created in the scope.  Storage that existed before
the scope (inputs, weights) is not charged.  Scopes nest; each active scope
sees everything.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

_ACTIVE: list["Tracker"] = []


@dataclass
class Tracker:
    label: str = ""
    ops: int = 0
    live_bytes: int = 0
    peak_bytes: int = 0
    allocations: int = 0

    def as_dict(self) -> dict:
        return {
            "label": self.label,
            "ops": self.ops,
            "peak_bytes": self.peak_bytes,
            "live_bytes": self.live_bytes,
            "allocations": self.allocations,
        }


def on_alloc(nbytes: int) -> tuple:
    if not _ACTIVE:
        return ()
    active = tuple(_ACTIVE)
    for t in active:
        t.live_bytes += nbytes
        t.allocations += 1
        if t.live_bytes > t.peak_bytes:
            t.peak_bytes = t.live_bytes
    return active


def on_free(trackers: tuple, nbytes: int) -> None:
    for t in trackers:
        t.live_bytes -= nbytes


def count_ops(n: int) -> None:
    for t in _ACTIVE:
        t.ops += n


@contextlib.contextmanager
def track(label: str = ""):
    t = Tracker(label)
    _ACTIVE.append(t)
    try:
        yield t
    finally:
        _ACTIVE.remove(t)
