"""Meta-training on GP regression tasks and held-out evaluation."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from . import numerics as nx
from .checkpoint import save_checkpoint
from .model import (
    ModelConfig,
    ModelParams,
    condition,
    gaussian_nll_diag,
    gaussian_nll_joint,
    predict_and,
    query_diagonal,
    query_joint,
    training_loss,
)
from .tasks import GpTaskConfig, TaskBatch, sample_task_batch

log = logging.getLogger(__name__)

METRIC_FIELDS = ("step", "train_nll", "eval_rbf", "eval_matern", "wall_ms", "ops")

# independent seed streams; training draws from (seed, 0, step), evaluation
# from (seed, 1, kernel), so held-out tasks never coincide with training ones
_TRAIN_STREAM = 0
_EVAL_STREAM = 1


@dataclass
class TrainConfig:
    steps: int = 20000
    batch_size: int = 16
    lr: float = 5e-4
    weight_decay: float = 0.0
    clip_norm: float = 1.0
    eval_interval: int = 2000
    eval_tasks: int = 1000
    eval_batch: int = 50
    eval_mode: str = "auto"  # "diagonal", "and", "joint" or "auto" (follows the variant)
    seed: int = 0
    timing: bool = True  # False writes wall_ms = 0 so logs are byte-reproducible

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be >= 1")
        if self.lr < 0 or self.weight_decay < 0:
            raise ValueError("lr and weight_decay must be non-negative")
        if self.eval_tasks < 1 or self.eval_batch < 1:
            raise ValueError("eval_tasks and eval_batch must be >= 1")
        if self.eval_mode not in ("auto", "diagonal", "and", "joint"):
            raise ValueError(f"unknown eval_mode {self.eval_mode!r}")


@dataclass
class MetricRecord:
    step: int
    train_nll: float
    eval_rbf: float | None = None
    eval_matern: float | None = None
    wall_ms: float = 0.0
    ops: int = 0

    def row(self) -> list:
        def fmt(v):
            return "" if v is None else repr(float(v))
        return [self.step, repr(float(self.train_nll)), fmt(self.eval_rbf), fmt(self.eval_matern),
                f"{self.wall_ms:.3f}", self.ops]


class TrainingDiverged(FloatingPointError):
    def __init__(self, step: int, msg: str, snapshot: str | None):
        super().__init__(f"non-finite training loss at step {step}: {msg}"
                         + (f" (snapshot: {snapshot})" if snapshot else ""))
        self.step = step
        self.snapshot = snapshot


@dataclass
class EvalResult:
    mean: float
    stderr: float
    per_task: np.ndarray
    n_tasks: int
    mode: str

    def as_dict(self) -> dict:
        return {"mean": self.mean, "stderr": self.stderr, "n_tasks": self.n_tasks, "mode": self.mode}


def train_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, _TRAIN_STREAM, step])


def eval_rng(seed: int, kernel: str) -> np.random.Generator:
    return np.random.default_rng([seed, _EVAL_STREAM, 0 if kernel == "rbf" else 1])


def train_step(params: ModelParams, cfg: ModelConfig, batch: TaskBatch, adam: nx.AdamState,
               clip_norm: float) -> tuple[float, float, int]:
    """One optimisation step on a fresh graph.  Returns (loss, grad norm, forward ops)."""
    leaves = params.tensors()
    with nx.track("step") as tr:
        loss = training_loss(params, cfg, batch.xc, batch.yc, batch.xt, batch.yt)
    grads = nx.grad(loss, leaves)
    grads, norm = nx.clip_grad_norm(grads, clip_norm)
    if not math.isfinite(norm):
        raise nx.NonFiniteError(f"gradient norm is {norm}")
    nx.adam_step(leaves, grads, adam)
    return loss.item(), norm, tr.ops


def train(params: ModelParams, cfg: ModelConfig, tcfg: TrainConfig, task_cfg: GpTaskConfig | None = None,
          out_dir=None, adam: nx.AdamState | None = None, start_step: int = 0,
          on_record=None) -> tuple[ModelParams, list[MetricRecord], nx.AdamState]:
    """Meta-train ``params`` in place for steps ``start_step+1 .. tcfg.steps``.

    Each step's task batch comes from its own seed, so a run resumed from a
    checkpoint continues exactly as the uninterrupted run would.  With
    ``out_dir`` set, metrics are appended to ``metrics.csv`` and a snapshot is
    written if the loss stops being finite.
    """
    task_cfg = replace(task_cfg or GpTaskConfig(), kernel="rbf", batch_size=tcfg.batch_size)
    if adam is None:
        adam = nx.AdamState(lr=tcfg.lr, weight_decay=tcfg.weight_decay)
    out = Path(out_dir) if out_dir is not None else None
    writer = _MetricWriter(out / "metrics.csv", append=start_step > 0) if out else None
    records = []
    try:
        for step in range(start_step + 1, tcfg.steps + 1):
            t0 = time.perf_counter()
            batch = sample_task_batch(task_cfg, train_rng(tcfg.seed, step))
            try:
                loss, _, ops = train_step(params, cfg, batch, adam, tcfg.clip_norm)
                if not math.isfinite(loss):
                    raise nx.NonFiniteError(f"loss is {loss}")
            except (nx.NonFiniteError, nx.CovarianceError) as exc:
                snap = None
                if out is not None:
                    snap = str(out / "nan_snapshot.bin")
                    save_checkpoint(snap, cfg, params, step - 1, adam, {"failed_step": step, "error": str(exc)})
                raise TrainingDiverged(step, str(exc), snap) from exc
            wall = (time.perf_counter() - t0) * 1000.0 if tcfg.timing else 0.0
            rec = MetricRecord(step, loss, wall_ms=wall, ops=ops)
            if step % tcfg.eval_interval == 0 or step == tcfg.steps:
                rec.eval_rbf = evaluate(params, cfg, task_cfg, tcfg, "rbf").mean
                rec.eval_matern = evaluate(params, cfg, task_cfg, tcfg, "matern52").mean
                log.info("step %d train_nll %.4f eval rbf %.4f matern %.4f", step, loss, rec.eval_rbf, rec.eval_matern)
            records.append(rec)
            if writer:
                writer.write(rec)
            if on_record:
                on_record(rec, adam)
    finally:
        if writer:
            writer.close()
    return params, records, adam


class _MetricWriter:
    def __init__(self, path: Path, append: bool):
        path.parent.mkdir(parents=True, exist_ok=True)
        fresh = not (append and path.exists())
        self._fh = open(path, "w" if fresh else "a", newline="")
        self._csv = csv.writer(self._fh)
        if fresh:
            self._csv.writerow(METRIC_FIELDS)

    def write(self, rec: MetricRecord) -> None:
        self._csv.writerow(rec.row())
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


def read_metrics(path) -> list[MetricRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))

    def opt(v):
        return float(v) if v != "" else None
    return [MetricRecord(int(r["step"]), float(r["train_nll"]), opt(r["eval_rbf"]), opt(r["eval_matern"]),
                         float(r["wall_ms"]), int(r["ops"])) for r in rows]


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def eval_batches(task_cfg: GpTaskConfig, tcfg: TrainConfig, kernel: str) -> list[TaskBatch]:
    """The fixed held-out task set for ``kernel`` (``tcfg.eval_tasks`` tasks in total)."""
    rng = eval_rng(tcfg.seed, kernel)
    left, batches = tcfg.eval_tasks, []
    while left > 0:
        b = min(left, tcfg.eval_batch)
        batches.append(sample_task_batch(replace(task_cfg, kernel=kernel, batch_size=b), rng))
        left -= b
    return batches


def task_loglik(params: ModelParams, cfg: ModelConfig, batch: TaskBatch, mode: str,
                rng: np.random.Generator | None = None, block_size: int | None = None,
                feedback: str = "sample", inspect=None) -> np.ndarray:
    """Per-task mean log-likelihood per target point, through the deployment path.

    ``inspect(batch, prediction)`` is called with the raw prediction
    (a ``GaussianPred`` or an ``AndPrediction``) before it is scored.
    """
    state = condition(params, cfg, batch.xc, batch.yc)
    if mode == "diagonal":
        pred = query_diagonal(params, cfg, state, batch.xt)
        if inspect:
            inspect(batch, pred)
        return -gaussian_nll_diag(pred, batch.yt, reduce="task").data
    if mode == "joint":
        pred = query_joint(params, cfg, state, batch.xt)
        if inspect:
            inspect(batch, pred)
        return -gaussian_nll_joint(pred, batch.yt, reduce="task").data
    if mode == "and":
        res = predict_and(params, cfg, state, batch.xt, rng=rng, mode=feedback, ys=batch.yt,
                          block_size=block_size)
        if inspect:
            inspect(batch, res)
        return res.loglik_per_point
    raise ValueError(f"unknown evaluation mode {mode!r}")


def _summarise(values: np.ndarray, mode: str) -> EvalResult:
    n = values.size
    stderr = float(values.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return EvalResult(float(values.mean()), stderr, values, n, mode)


def evaluate(params: ModelParams, cfg: ModelConfig, task_cfg: GpTaskConfig, tcfg: TrainConfig,
             kernel: str = "rbf", mode: str | None = None, block_size: int | None = None,
             feedback: str = "sample", inspect=None) -> EvalResult:
    """Mean +- standard error of the per-point target log-likelihood over held-out tasks.

    ``mode`` defaults to ``tcfg.eval_mode``; ``auto`` means diagonal for the
    diagonal variant and autoregressive blocks of ``B_Q`` for the AND variant.
    ``block_size`` overrides ``B_Q``; ``0`` means one block holding all targets.
    ``inspect`` is passed through to :func:`task_loglik`.
    """
    mode = mode or tcfg.eval_mode
    if mode == "auto":
        mode = "diagonal" if cfg.variant == "diagonal" else "and"
    rng = np.random.default_rng([tcfg.seed, _EVAL_STREAM, 2])
    out = []
    for batch in eval_batches(task_cfg, tcfg, kernel):
        bs = batch.n_target if block_size == 0 else block_size
        out.append(task_loglik(params, cfg, batch, mode, rng=rng, block_size=bs, feedback=feedback,
                               inspect=inspect))
    return _summarise(np.concatenate(out), mode if mode != "and" else f"and(B_Q={block_size if block_size is not None else cfg.B_Q})")


def constant_gaussian_baseline(batches: list[TaskBatch], floor: float = 1e-4) -> dict[str, EvalResult]:
    """Score each task's targets under N(mean, var) fitted to its context outputs.

    Both the maximum-likelihood (ddof=0) and unbiased (ddof=1) variance fits
    are reported, with variances floored at ``floor``.
    """
    res = {}
    for ddof in (0, 1):
        vals = []
        for b in batches:
            mu = b.yc.mean(axis=1, keepdims=True)
            var = b.yc.var(axis=1, ddof=ddof, keepdims=True) if b.n_context > ddof else np.zeros_like(mu)
            var = np.maximum(var, floor)
            ll = -0.5 * (np.log(2 * np.pi * var) + (b.yt - mu) ** 2 / var)
            vals.append(ll.sum(-1).mean(-1))
        res[f"ddof{ddof}"] = _summarise(np.concatenate(vals), f"constant(ddof={ddof})")
    return res


def train_config_dict(tcfg: TrainConfig) -> dict:
    return asdict(tcfg)
