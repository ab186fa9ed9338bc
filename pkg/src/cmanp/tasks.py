"""1-D GP regression tasks for meta-training and evaluation.

Each batch draws one context size ``N ~ U{n_low, ..., n_high-1}`` and one
target size ``M ~ U{m_low, ..., total-N-1}`` shared by its tasks, so the
batch stacks into dense arrays.  Every task has its own kernel
hyperparameters and input locations.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .container import read_container, write_container

KERNELS = ("rbf", "matern52")


@dataclass(frozen=True)
class GpTaskConfig:
    kernel: str = "rbf"
    length_range: tuple[float, float] = (0.6, 1.0)
    scale_range: tuple[float, float] = (0.1, 1.0)
    n_range: tuple[int, int] = (3, 47)  # half-open
    m_low: int = 3
    max_points: int = 50  # M is drawn from [m_low, max_points - N)
    x_range: tuple[float, float] = (-2.0, 2.0)
    jitter: float = 1e-6
    batch_size: int = 16

    def __post_init__(self):
        if self.kernel not in KERNELS:
            raise ValueError(f"kernel must be one of {KERNELS}, got {self.kernel!r}")
        for name in ("length_range", "scale_range", "x_range"):
            lo, hi = getattr(self, name)
            if not lo < hi:
                raise ValueError(f"{name} must be a non-empty interval, got {(lo, hi)}")
        if self.length_range[0] <= 0 or self.scale_range[0] <= 0:
            raise ValueError("kernel hyperparameter ranges must be positive")
        n_lo, n_hi = self.n_range
        if not 1 <= n_lo < n_hi:
            raise ValueError(f"n_range must satisfy 1 <= low < high, got {self.n_range}")
        if self.m_low < 1 or self.m_low >= self.max_points - (n_hi - 1):
            raise ValueError("max_points leaves no room for targets at the largest N")
        if self.jitter <= 0:
            raise ValueError("jitter must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GpTaskConfig":
        d = dict(d)
        for k in ("length_range", "scale_range", "n_range", "x_range"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class TaskBatch:
    xc: np.ndarray  # [B, N, 1]
    yc: np.ndarray
    xt: np.ndarray  # [B, M, 1]
    yt: np.ndarray
    lengths: np.ndarray  # [B]
    scales: np.ndarray  # [B]

    @property
    def size(self) -> int:
        return self.xc.shape[0]

    @property
    def n_context(self) -> int:
        return self.xc.shape[1]

    @property
    def n_target(self) -> int:
        return self.xt.shape[1]

    def task(self, i: int) -> "TaskBatch":
        sl = slice(i, i + 1)
        return TaskBatch(self.xc[sl], self.yc[sl], self.xt[sl], self.yt[sl], self.lengths[sl], self.scales[sl])


class KernelError(ValueError):
    pass


def kernel_eval(kind: str, length: float, scale: float, x, x2) -> np.ndarray:
    """Stationary covariance ``k(x, x2)``, elementwise with numpy broadcasting."""
    if length <= 0 or scale <= 0:
        raise KernelError(f"kernel hyperparameters must be positive, got l={length}, sigma_f={scale}")
    d = np.abs(np.asarray(x, dtype=np.float64) - np.asarray(x2, dtype=np.float64))
    if kind == "rbf":
        return scale ** 2 * np.exp(-0.5 * (d / length) ** 2)
    if kind == "matern52":
        r = math.sqrt(5.0) * d / length
        return scale ** 2 * (1.0 + r + r * r / 3.0) * np.exp(-r)
    raise KernelError(f"unknown kernel {kind!r}")


def kernel_matrix(kind: str, length: float, scale: float, x: np.ndarray) -> np.ndarray:
    """Gram matrix for 1-D inputs ``x`` of shape [n] or [n, 1]."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    return kernel_eval(kind, length, scale, x[:, None], x[None, :])


def gp_cholesky(K: np.ndarray, jitter: float) -> np.ndarray:
    """Cholesky of ``K + jitter I``, retrying once with ten times the jitter."""
    eye = np.eye(K.shape[-1])
    for j in (jitter, 10.0 * jitter):
        try:
            return np.linalg.cholesky(K + j * eye)
        except np.linalg.LinAlgError:
            continue
    raise np.linalg.LinAlgError(f"kernel matrix not PSD even with jitter {10.0 * jitter:g}")


def sample_gp(rng: np.random.Generator, x: np.ndarray, kind: str, length: float, scale: float,
              jitter: float = 1e-6, n_samples: int | None = None) -> np.ndarray:
    """Draw zero-mean GP function values at ``x`` ([n]); returns [n] or [n_samples, n]."""
    L = gp_cholesky(kernel_matrix(kind, length, scale, x), jitter)
    n = L.shape[0]
    z = rng.standard_normal((n,) if n_samples is None else (n_samples, n))
    return z @ L.T


def sample_task_batch(cfg: GpTaskConfig, rng: np.random.Generator) -> TaskBatch:
    n = int(rng.integers(cfg.n_range[0], cfg.n_range[1]))
    m = int(rng.integers(cfg.m_low, cfg.max_points - n))
    total = n + m
    B = cfg.batch_size
    lengths = rng.uniform(*cfg.length_range, size=B)
    scales = rng.uniform(*cfg.scale_range, size=B)
    x = rng.uniform(*cfg.x_range, size=(B, total))
    y = np.empty_like(x)
    for b in range(B):
        y[b] = sample_gp(rng, x[b], cfg.kernel, lengths[b], scales[b], cfg.jitter)
    x, y = x[..., None], y[..., None]
    return TaskBatch(x[:, :n], y[:, :n], x[:, n:], y[:, n:], lengths, scales)


def dump_task_batch(path, batch: TaskBatch, meta: dict | None = None) -> None:
    arrays = {k: getattr(batch, k) for k in ("xc", "yc", "xt", "yt", "lengths", "scales")}
    write_container(path, {"kind": "task_batch", **(meta or {})}, arrays)


def load_task_batch(path) -> TaskBatch:
    meta, arrays = read_container(path)
    if meta.get("kind") != "task_batch":
        raise ValueError(f"{path} does not hold a task batch")
    return TaskBatch(**arrays)
