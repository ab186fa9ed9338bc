"""Counter-based memory and computation benchmarks for conditioning and updates."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .model import ModelConfig, ModelParams, condition, update


@dataclass
class MemoryRow:
    n: int
    peak_bytes: int
    ops: int
    allocations: int
    wall_ms: float


@dataclass
class UpdateRow:
    prior_n: int
    u: int
    ops: int
    absorb_ops: int
    replay_ops: int
    wall_ms: float


def synthetic_context(rng: np.random.Generator, n: int, cfg: ModelConfig) -> tuple[np.ndarray, np.ndarray]:
    x = rng.uniform(-2.0, 2.0, size=(n, cfg.x_dim))
    y = np.sin(2.0 * x[:, :1]) + 0.1 * rng.standard_normal((n, cfg.y_dim))
    return x, y


def measure_condition(params: ModelParams, cfg: ModelConfig, xc: np.ndarray, yc: np.ndarray,
                      chunked: bool = True) -> MemoryRow:
    """Peak live bytes of tensors created while conditioning on ``(xc, yc)``.

    The context arrives as plain arrays and is embedded chunk by chunk, so
    only per-chunk tensors are charged.  ``chunked=False`` embeds and attends
    the whole context at once (the negative control).
    """
    chunk = cfg.B_C if chunked else xc.shape[-2]
    t0 = time.perf_counter()
    with nx.track("condition") as tr:
        state = condition(params, cfg, xc, yc, chunk_size=chunk)
        del state
    return MemoryRow(xc.shape[-2], tr.peak_bytes, tr.ops, tr.allocations, (time.perf_counter() - t0) * 1e3)


def memory_sweep(params: ModelParams, cfg: ModelConfig, ns, seed: int = 0, chunked: bool = True) -> list[MemoryRow]:
    rng = np.random.default_rng(seed)
    return [measure_condition(params, cfg, *synthetic_context(rng, n, cfg), chunked=chunked) for n in ns]


def memory_verdict(rows: list[MemoryRow]) -> bool:
    return len({r.peak_bytes for r in rows}) == 1


def measure_update(params: ModelParams, cfg: ModelConfig, prior_n: int, u: int, seed: int = 0) -> UpdateRow:
    rng = np.random.default_rng([seed, prior_n, u])
    state = condition(params, cfg, *synthetic_context(rng, prior_n, cfg))
    xn, yn = synthetic_context(rng, u, cfg)
    t0 = time.perf_counter()
    with nx.track("update") as tr:
        new = update(params, cfg, state, xn, yn)
    wall = (time.perf_counter() - t0) * 1e3
    return UpdateRow(prior_n, u, tr.ops, new.update_ops["absorb"], new.update_ops["replay"], wall)


def update_sweep(params: ModelParams, cfg: ModelConfig, prior_ns, u_fixed: int, u_sweep, seed: int = 0,
                 sweep_prior: int | None = None) -> tuple[list[UpdateRow], list[UpdateRow]]:
    """Update cost at fixed ``u`` over ``prior_ns``, and over ``u_sweep`` at one prior size."""
    by_prior = [measure_update(params, cfg, n, u_fixed, seed) for n in prior_ns]
    base = sweep_prior if sweep_prior is not None else min(prior_ns)
    by_u = [measure_update(params, cfg, base, u, seed) for u in u_sweep]
    return by_prior, by_u


def update_verdict(by_prior: list[UpdateRow], by_u: list[UpdateRow], lo: float = 1.8, hi: float = 2.2) -> dict:
    """Prior-N independence of the whole update, and linearity in ``u``.

    An update costs ``a * u + c``: absorbing the new rows is proportional to
    ``u`` and replaying the fixed-size latent tails is a constant ``c``.  The
    doubling ratio is checked on the absorb phase and on the total, so the
    ``u`` sweep must be large enough for ``a * u`` to dominate ``c``.
    """
    independent = len({r.ops for r in by_prior}) == 1
    ratios = [b.absorb_ops / a.absorb_ops for a, b in zip(by_u, by_u[1:])]
    total_ratios = [b.ops / a.ops for a, b in zip(by_u, by_u[1:])]
    replay_const = len({r.replay_ops for r in by_u + by_prior}) == 1
    linear = all(lo <= r <= hi for r in ratios)
    total_linear = all(lo <= r <= hi for r in total_ratios)
    return {
        "independent_of_prior_n": independent,
        "absorb_doubling_ratios": ratios,
        "total_doubling_ratios": total_ratios,
        "replay_constant": replay_const,
        "linear_in_u": linear,
        "total_linear_in_u": total_linear,
        "pass": independent and linear and total_linear and replay_const,
    }
