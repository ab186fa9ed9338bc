"""Model checkpoints: config, named parameters, optional Adam state, step."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .container import ContainerError, VersionError, read_container, write_container
from .model import ModelConfig, ModelParams, init_params
from .numerics import AdamState

CHECKPOINT_KIND = "checkpoint"

__all__ = ["Checkpoint", "ContainerError", "VersionError", "save_checkpoint", "load_checkpoint"]


@dataclass
class Checkpoint:
    config: ModelConfig
    params: ModelParams
    step: int = 0
    adam: AdamState | None = None
    meta: dict = field(default_factory=dict)


def save_checkpoint(path, config: ModelConfig, params: ModelParams, step: int = 0,
                    adam: AdamState | None = None, meta: dict | None = None) -> None:
    named = params.named()
    arrays = {f"param/{n}": t.data for n, t in named}
    header = {"kind": CHECKPOINT_KIND, "config": config.to_dict(), "step": int(step), "extra": meta or {}}
    if adam is not None:
        header["adam"] = {k: getattr(adam, k) for k in ("lr", "beta1", "beta2", "eps", "weight_decay", "step")}
        if adam.m:
            for (n, _), m, v in zip(named, adam.m, adam.v):
                arrays[f"adam.m/{n}"] = m
                arrays[f"adam.v/{n}"] = v
    write_container(path, header, arrays)


def load_checkpoint(path) -> Checkpoint:
    meta, arrays = read_container(path)
    if meta.get("kind") != CHECKPOINT_KIND:
        raise ContainerError(f"{path} is not a model checkpoint")
    cfg = ModelConfig(**meta["config"])
    params = init_params(cfg, seed=0)
    named = params.named()
    expected = {f"param/{n}" for n, _ in named}
    present = {k for k in arrays if k.startswith("param/")}
    if expected != present:
        missing, extra = sorted(expected - present), sorted(present - expected)
        raise ContainerError(f"{path}: parameter set mismatch (missing {missing[:3]}, unexpected {extra[:3]})")
    for n, t in named:
        a = arrays[f"param/{n}"]
        if a.shape != t.shape:
            raise ContainerError(f"{path}: {n} has shape {a.shape}, config implies {t.shape}")
        t.data = a
    adam = None
    if "adam" in meta:
        adam = AdamState(**meta["adam"])
        if f"adam.m/{named[0][0]}" in arrays:
            adam.m = [arrays[f"adam.m/{n}"] for n, _ in named]
            adam.v = [arrays[f"adam.v/{n}"] for n, _ in named]
    return Checkpoint(cfg, params, meta["step"], adam, meta.get("extra", {}))


def params_equal(a: ModelParams, b: ModelParams) -> bool:
    """Bitwise equality of two parameter sets."""
    na, nb = a.named(), b.named()
    return [n for n, _ in na] == [n for n, _ in nb] and all(
        np.array_equal(x.data, y.data) for (_, x), (_, y) in zip(na, nb))

