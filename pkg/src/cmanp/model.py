"""Constant-memory attentive neural process.

Three phases:

* ``condition``: stream the context through the context embedder in chunks of
  ``B_C`` rows and fold each chunk into every block's CA1 state, then run the
  fixed-size block tails to get the latent sets ``LEMB_1..LEMB_K``.
* ``query_*``: ``QEMB_0 = embed(x)``, ``QEMB_i = CA(QEMB_{i-1}, LEMB_i)``,
  then a per-point predictor head.
* ``update``: fold new pairs into the CA1 states and replay the tails.  The
  original context is never revisited.

The ``and`` variant predicts a low-rank-plus-diagonal joint covariance and is
deployed autoregressively in blocks of ``B_Q`` targets (:func:`predict_and`).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from .attention import AttnWeights, cross_attention_block, init_attention
from .cmab import (
    CmabCache,
    CmabWeights,
    absorb_stack,
    cmab_stack_forward,
    init_cmab,
    replay_stack,
    stack_training_forward,
)
from .numerics import Linear, Tensor, fingerprint, mlp_forward

VARIANTS = ("diagonal", "and")
FEEDBACK_MODES = ("sample", "mean", "observed")


@dataclass
class ModelConfig:
    K: int = 2
    L_I: int = 32
    L_B: int = 32
    d_model: int = 64
    heads: int = 4
    d_ff: int = 128
    B_C: int = 64
    B_Q: int = 5
    rank: int = 4
    x_dim: int = 1
    y_dim: int = 1
    std_floor: float = 0.01
    variant: str = "diagonal"

    def __post_init__(self):
        for name in ("K", "L_I", "L_B", "d_model", "heads", "d_ff", "B_C", "B_Q", "rank", "x_dim", "y_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.d_model % self.heads:
            raise ValueError("heads must divide d_model")
        if not 0.0 < self.std_floor < 1.0:
            raise ValueError("std_floor must lie in (0, 1)")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")

    @property
    def head_width(self) -> int:
        if self.variant == "diagonal":
            return 2 * self.y_dim
        return self.y_dim * (2 + self.rank)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ModelParams:
    lemb0: Tensor  # [L_I, d_model]
    context_embed: list[Linear]
    query_embed: list[Linear]
    blocks: list[CmabWeights]
    query_blocks: list[AttnWeights]
    head: list[Linear]

    def named(self) -> list[tuple[str, Tensor]]:
        return list(nx.named_tensors(self))

    def tensors(self) -> list[Tensor]:
        return [t for _, t in nx.named_tensors(self)]


def init_params(cfg: ModelConfig, seed: int = 0) -> ModelParams:
    rng = np.random.default_rng(seed)
    d = cfg.d_model
    return ModelParams(
        lemb0=Tensor(rng.standard_normal((cfg.L_I, d)), requires_grad=True),
        context_embed=nx.init_mlp(rng, [cfg.x_dim + cfg.y_dim, d, d]),
        query_embed=nx.init_mlp(rng, [cfg.x_dim, d, d]),
        blocks=[init_cmab(rng, d, cfg.heads, cfg.d_ff, cfg.L_B) for _ in range(cfg.K)],
        query_blocks=[init_attention(rng, d, cfg.heads, cfg.d_ff, cross=True) for _ in range(cfg.K)],
        head=nx.init_mlp(rng, [d, cfg.d_ff, cfg.head_width]),
    )


@dataclass
class GaussianPred:
    """Predictive Gaussian over ``M`` targets.

    Diagonal form: ``mean`` and ``var`` are ``[..., M, y_dim]``.  Joint form:
    covariance over the flattened ``M * y_dim`` outputs is
    ``factor @ factor.T + diag(diag)`` with ``factor`` ``[..., M*y_dim, r]``.
    """

    mean: Tensor
    var: Tensor | None = None
    factor: Tensor | None = None
    diag: Tensor | None = None

    @property
    def is_joint(self) -> bool:
        return self.factor is not None

    def marginal_var(self) -> np.ndarray:
        if not self.is_joint:
            return self.var.data
        v = (self.factor.data ** 2).sum(-1) + self.diag.data
        return v.reshape(self.mean.shape)

    def covariance(self) -> np.ndarray:
        if not self.is_joint:
            raise ValueError("diagonal prediction has no joint covariance")
        F = self.factor.data
        cov = F @ np.swapaxes(F, -1, -2)
        idx = np.arange(F.shape[-2])
        cov[..., idx, idx] += self.diag.data
        return cov


@dataclass
class ConditionedState:
    lembs: list[Tensor]
    caches: list[CmabCache]
    count: int
    params_id: bytes
    update_ops: dict = field(default_factory=dict)


class StaleParamsError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# shared pieces
# ---------------------------------------------------------------------------


def _check_xy(cfg: ModelConfig, x: np.ndarray, y: np.ndarray | None = None) -> None:
    if x.ndim < 2 or x.shape[-1] != cfg.x_dim:
        raise nx.ShapeError(f"x must be [..., n, {cfg.x_dim}], got {x.shape}")
    if y is not None:
        if y.shape[-1] != cfg.y_dim or y.shape[:-1] != x.shape[:-1]:
            raise nx.ShapeError(f"y shape {y.shape} does not pair with x shape {x.shape}")


def _embed_pairs(params: ModelParams, x, y) -> Tensor:
    return mlp_forward(Tensor(np.concatenate([x, y], axis=-1)), params.context_embed)


def _context_chunks(params: ModelParams, x: np.ndarray, y: np.ndarray, chunk: int):
    n = x.shape[-2]
    for s in range(0, n, chunk):
        yield _embed_pairs(params, x[..., s:s + chunk, :], y[..., s:s + chunk, :])


def _decode(params: ModelParams, lembs: list[Tensor], xs: np.ndarray) -> Tensor:
    q = mlp_forward(Tensor(xs), params.query_embed)
    for lemb, w in zip(lembs, params.query_blocks):
        q, _ = cross_attention_block(q, lemb, w, return_state=False)
    return mlp_forward(q, params.head)


def _bounded_std(raw: Tensor, floor: float) -> Tensor:
    return nx.add(nx.mul(nx.softplus(raw), 1.0 - floor), floor)


def _head_to_pred(cfg: ModelConfig, out: Tensor) -> GaussianPred:
    y = cfg.y_dim
    mean = out[..., :y]
    std = _bounded_std(out[..., y:2 * y], cfg.std_floor)
    if cfg.variant == "diagonal":
        return GaussianPred(mean, var=nx.mul(std, std))
    *lead, m, _ = out.shape
    factor = out[..., 2 * y:].reshape(*lead, m * y, cfg.rank)
    diag = nx.mul(std, std).reshape(*lead, m * y)
    return GaussianPred(mean, factor=factor, diag=diag)


# ---------------------------------------------------------------------------
# training path (differentiable, no caches)
# ---------------------------------------------------------------------------


def forward_train(params: ModelParams, cfg: ModelConfig, xc: np.ndarray, yc: np.ndarray,
                  xt: np.ndarray) -> GaussianPred:
    """Full recompute from the raw context; gradients flow to every parameter."""
    _check_xy(cfg, xc, yc)
    _check_xy(cfg, xt)
    ctx = _embed_pairs(params, xc, yc)
    lembs = stack_training_forward(params.lemb0, ctx, params.blocks)
    return _head_to_pred(cfg, _decode(params, lembs, xt))


def training_loss(params: ModelParams, cfg: ModelConfig, xc, yc, xt, yt) -> Tensor:
    pred = forward_train(params, cfg, xc, yc, xt)
    if cfg.variant == "diagonal":
        return gaussian_nll_diag(pred, yt)
    return gaussian_nll_joint(pred, yt)


# ---------------------------------------------------------------------------
# deployment phases
# ---------------------------------------------------------------------------


def condition(params: ModelParams, cfg: ModelConfig, xc: np.ndarray, yc: np.ndarray,
              chunk_size: int | None = None) -> ConditionedState:
    """Encode a context set.  Scratch memory is independent of the context size.

    ``chunk_size`` overrides ``cfg.B_C``; passing the context size (or more)
    embeds and attends the whole context at once.
    """
    _check_xy(cfg, xc, yc)
    if xc.shape[-2] == 0:
        raise nx.ShapeError("cannot condition on an empty context")
    chunk = chunk_size or cfg.B_C
    with nx.no_grad():
        lembs, caches = cmab_stack_forward(params.lemb0, _context_chunks(params, xc, yc, chunk),
                                           params.blocks, chunk_size=None)
    return ConditionedState(lembs, caches, xc.shape[-2], fingerprint(params))


def update(params: ModelParams, cfg: ModelConfig, state: ConditionedState,
           x_new: np.ndarray, y_new: np.ndarray) -> ConditionedState:
    """Add new context pairs without revisiting the old ones."""
    _check_xy(cfg, x_new, y_new)
    u = x_new.shape[-2]
    if u == 0:
        raise nx.ShapeError("update needs at least one new pair")
    if fingerprint(params) != state.params_id:
        raise StaleParamsError("model parameters changed since this state was conditioned")
    with nx.no_grad():
        with nx.track("absorb") as t_abs:
            states = absorb_stack(state.caches, _context_chunks(params, x_new, y_new, cfg.B_C),
                                  params.blocks, chunk_size=None)
        with nx.track("replay") as t_rep:
            lembs, caches = replay_stack(params.lemb0, states, params.blocks)
    ops = {"absorb": t_abs.ops, "replay": t_rep.ops, "total": t_abs.ops + t_rep.ops}
    return ConditionedState(lembs, caches, state.count + u, state.params_id, ops)


def _query(params: ModelParams, cfg: ModelConfig, state: ConditionedState, xs: np.ndarray) -> GaussianPred:
    _check_xy(cfg, xs)
    if xs.shape[-2] == 0:
        raise nx.ShapeError("no target points")
    with nx.no_grad(), nx.row_exact():
        return _head_to_pred(cfg, _decode(params, state.lembs, xs))


def query_diagonal(params: ModelParams, cfg: ModelConfig, state: ConditionedState,
                   xs: np.ndarray) -> GaussianPred:
    """Independent per-point Gaussians; each row depends only on its own x."""
    pred = _query(params, cfg, state, xs)
    if pred.is_joint:
        return GaussianPred(pred.mean, var=Tensor(pred.marginal_var()))
    return pred


def query_joint(params: ModelParams, cfg: ModelConfig, state: ConditionedState,
                xs: np.ndarray) -> GaussianPred:
    if cfg.variant != "and":
        raise ValueError("joint queries need a model built with variant='and'")
    return _query(params, cfg, state, xs)


# ---------------------------------------------------------------------------
# likelihoods
# ---------------------------------------------------------------------------

_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


def gaussian_nll_diag(pred: GaussianPred, ys, reduce: str = "mean") -> Tensor:
    """Negative log-likelihood per target point (summed over output dims).

    ``reduce="mean"`` averages over points and tasks to a scalar;
    ``reduce="task"`` returns one value per leading index.
    """
    var = pred.var if not pred.is_joint else Tensor(pred.marginal_var())
    ys = nx.as_tensor(ys)
    if ys.shape != pred.mean.shape:
        raise nx.ShapeError(f"targets {ys.shape} vs predictions {pred.mean.shape}")
    r = nx.sub(ys, pred.mean)
    per = nx.add(nx.mul(nx.log(var), 0.5), nx.div(nx.mul(r, r), nx.mul(var, 2.0)))
    per_point = nx.add(nx.sum_(per, axis=-1), _HALF_LOG_2PI * ys.shape[-1])
    per_task = nx.mean(per_point, axis=-1)
    return nx.mean(per_task) if reduce == "mean" else per_task


def gaussian_nll_joint(pred: GaussianPred, ys, reduce: str = "mean") -> Tensor:
    """Joint negative log-likelihood divided by the number of target points."""
    if not pred.is_joint:
        raise ValueError("joint likelihood needs a joint prediction")
    ys = nx.as_tensor(ys)
    if ys.shape != pred.mean.shape:
        raise nx.ShapeError(f"targets {ys.shape} vs predictions {pred.mean.shape}")
    *lead, m, yd = ys.shape
    nll = nx.mvn_lowrank_nll(ys.reshape(*lead, m * yd), pred.mean.reshape(*lead, m * yd),
                             pred.factor, pred.diag)
    per_task = nx.mul(nll, 1.0 / m)
    return nx.mean(per_task) if reduce == "mean" else per_task


# ---------------------------------------------------------------------------
# autoregressive not-diagonal deployment
# ---------------------------------------------------------------------------


@dataclass
class AndPrediction:
    means: list[np.ndarray]  # per block, [..., b, y_dim]
    covariances: list[np.ndarray]  # per block, [..., b*y_dim, b*y_dim]
    samples: list[np.ndarray] | None  # per block, sample mode only
    block_mean_loglik: np.ndarray | None  # [..., n_blocks], per point within each block
    block_sizes: list[int]

    @property
    def n_points(self) -> int:
        return sum(self.block_sizes)

    @property
    def block_loglik(self) -> np.ndarray | None:
        """Log-likelihood of each block's targets under that block's Gaussian."""
        if self.block_mean_loglik is None:
            return None
        return self.block_mean_loglik * np.asarray(self.block_sizes, dtype=np.float64)

    @property
    def loglik_per_point(self) -> np.ndarray | None:
        if self.block_mean_loglik is None:
            return None
        if len(self.block_sizes) == 1:
            return self.block_mean_loglik[..., 0]
        return self.block_loglik.sum(-1) / self.n_points

    @property
    def mean(self) -> np.ndarray:
        return np.concatenate(self.means, axis=-2)


def _sample_gaussian(mean: np.ndarray, cov: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    try:
        L = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise nx.CovarianceError(f"block covariance is not positive definite: {exc}") from None
    z = rng.standard_normal(mean.shape)
    return mean + (L @ z[..., None])[..., 0]


def predict_and(params: ModelParams, cfg: ModelConfig, state: ConditionedState, xs: np.ndarray,
                rng: np.random.Generator | None = None, mode: str = "sample",
                ys: np.ndarray | None = None, block_size: int | None = None) -> AndPrediction:
    """Predict ``xs`` in consecutive blocks, feeding each block back as context.

    ``mode`` picks what is fed back: ``sample`` draws from the block's joint
    Gaussian, ``mean`` feeds the predicted mean, ``observed`` feeds the true
    ``ys`` (the chain-rule factorisation of the joint likelihood).  Targets are
    processed in the order given.  With ``ys`` the log-likelihood of each
    block under its predictive is recorded.
    """
    if mode not in FEEDBACK_MODES:
        raise ValueError(f"mode must be one of {FEEDBACK_MODES}")
    if mode == "sample" and rng is None:
        raise ValueError("sample mode needs an rng")
    if mode == "observed" and ys is None:
        raise ValueError("observed mode needs ys")
    _check_xy(cfg, xs, ys)
    bq = block_size or cfg.B_Q
    m = xs.shape[-2]
    n_blocks = -(-m // bq)
    means, covs, samples, lls = [], [], [] if mode == "sample" else None, []
    for k in range(n_blocks):
        sl = slice(k * bq, min(m, (k + 1) * bq))
        xb = xs[..., sl, :]
        pred = query_joint(params, cfg, state, xb)
        mu = pred.mean.data
        cov = pred.covariance()
        means.append(mu)
        covs.append(cov)
        if ys is not None:
            lls.append(-gaussian_nll_joint(pred, ys[..., sl, :], reduce="task").data)
        if mode == "sample":
            flat = _sample_gaussian(mu.reshape(*mu.shape[:-2], -1), cov, rng)
            samples.append(flat.reshape(mu.shape))
        if k == n_blocks - 1:
            break
        feed = {"sample": samples[-1] if samples else None, "mean": mu,
                "observed": ys[..., sl, :] if ys is not None else None}[mode]
        state = update(params, cfg, state, xb, feed)
    block_ll = np.stack(lls, axis=-1) if lls else None
    sizes = [min(m, (k + 1) * bq) - k * bq for k in range(n_blocks)]
    return AndPrediction(means, covs, samples, block_ll, sizes)
