"""Multi-head attention blocks and the incrementally updatable cross-attention.

Blocks are pre-norm transformer blocks::

    h   = q + Wo . MHA(LN_q(q), LN_kv(kv))
    out = h + FFN(LN_ff(h))

Only the raw multi-head attention output is stateful.  For a fixed query set
it is kept per head and query slot as a running softmax average ``emb`` plus
the log of its normaliser ``log_c``; new key/value rows are folded in with

    log_c' = log_c + softplus(logsumexp(s_new - log_c))
    emb'   = exp(log_c - log_c') * emb + sum_i exp(s_i - log_c') v_i

which touches only the new rows.  The residual/FFN tail is constant size and
is replayed from the state by :func:`state_finish`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import Tensor
from .numerics.params import fingerprint, named_tensors  # noqa: F401


class StaleStateError(RuntimeError):
    """A cached state is being combined with weights that did not produce it."""


class EmptyStateError(RuntimeError):
    pass


@dataclass(frozen=True)
class AttnConfig:
    d_model: int
    heads: int

    def __post_init__(self):
        if self.heads < 1 or self.d_model % self.heads:
            raise ValueError(f"heads={self.heads} must divide d_model={self.d_model}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.heads

    @property
    def scale(self) -> float:
        return 1.0 / math.sqrt(self.d_head)


@dataclass
class AttnWeights:
    heads: int
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    ln_q_g: Tensor
    ln_q_b: Tensor
    ln_ff_g: Tensor
    ln_ff_b: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    # separate key/value norm for cross-attention; self-attention reuses ln_q
    ln_kv_g: Tensor | None = None
    ln_kv_b: Tensor | None = None

    @property
    def config(self) -> AttnConfig:
        return AttnConfig(self.wq.shape[0], self.heads)


def init_attention(rng: np.random.Generator, d_model: int, heads: int, d_ff: int,
                   cross: bool) -> AttnWeights:
    AttnConfig(d_model, heads)
    lin = [nx.init_linear(rng, d_model, d_model) for _ in range(4)]
    ff1 = nx.init_linear(rng, d_model, d_ff)
    ff2 = nx.init_linear(rng, d_ff, d_model)

    def ones():
        return Tensor(np.ones(d_model), requires_grad=True)

    def zeros():
        return Tensor(np.zeros(d_model), requires_grad=True)

    return AttnWeights(
        heads=heads,
        wq=lin[0].weight, bq=lin[0].bias,
        wk=lin[1].weight, bk=lin[1].bias,
        wv=lin[2].weight, bv=lin[2].bias,
        wo=lin[3].weight, bo=lin[3].bias,
        ln_q_g=ones(), ln_q_b=zeros(),
        ln_ff_g=ones(), ln_ff_b=zeros(),
        w1=ff1.weight, b1=ff1.bias, w2=ff2.weight, b2=ff2.bias,
        ln_kv_g=ones() if cross else None,
        ln_kv_b=zeros() if cross else None,
    )


@dataclass
class AttnState:
    """Running raw attention output for a fixed query set.

    ``emb`` is ``[..., heads, L_q, d_head]`` and ``log_c`` is
    ``[..., heads, L_q]``.  ``queries`` caches the scaled, head-split query
    projections so updates never recompute them.  A state with ``count == 0``
    has no ``emb``/``log_c`` yet and can only be appended to.
    """

    emb: Tensor | None
    log_c: Tensor | None
    count: int
    queries: Tensor
    weights_id: bytes


# ---------------------------------------------------------------------------
# projections
# ---------------------------------------------------------------------------


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, L, d = x.shape
    return nx.swapaxes(x.reshape(*lead, L, heads, d // heads), -3, -2)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, H, L, dh = x.shape
    return nx.swapaxes(x, -3, -2).reshape(*lead, L, H * dh)


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return nx.add(nx.matmul(x, w), b)


def project_queries(q: Tensor, w: AttnWeights) -> Tensor:
    """Head-split queries with the 1/sqrt(d_head) score scale folded in."""
    qn = nx.layer_norm(q, w.ln_q_g, w.ln_q_b)
    return nx.mul(_split_heads(_linear(qn, w.wq, w.bq), w.heads), w.config.scale)


def project_kv(kv: Tensor, w: AttnWeights) -> tuple[Tensor, Tensor]:
    if w.ln_kv_g is not None:
        kn = nx.layer_norm(kv, w.ln_kv_g, w.ln_kv_b)
    else:
        kn = nx.layer_norm(kv, w.ln_q_g, w.ln_q_b)
    k = _split_heads(_linear(kn, w.wk, w.bk), w.heads)
    v = _split_heads(_linear(kn, w.wv, w.bv), w.heads)
    return k, v


def _tail(q: Tensor, raw: Tensor, w: AttnWeights) -> Tensor:
    h = nx.add(q, _linear(_merge_heads(raw), w.wo, w.bo))
    f = nx.layer_norm(h, w.ln_ff_g, w.ln_ff_b)
    f = _linear(nx.relu(_linear(f, w.w1, w.b1)), w.w2, w.b2)
    return nx.add(h, f)


def _scores(queries: Tensor, k: Tensor) -> Tensor:
    return nx.matmul(queries, nx.swapaxes(k, -1, -2))


# ---------------------------------------------------------------------------
# blocks
# ---------------------------------------------------------------------------


def self_attention_block(x: Tensor, w: AttnWeights) -> Tensor:
    if x.ndim < 2 or x.shape[-2] < 1:
        raise nx.ShapeError(f"self-attention needs [..., L>=1, d], got {x.shape}")
    if x.shape[-1] != w.wq.shape[0]:
        raise nx.ShapeError(f"input width {x.shape[-1]} != d_model {w.wq.shape[0]}")
    queries = project_queries(x, w)
    k, v = project_kv(x, w)
    raw = nx.matmul(nx.softmax(_scores(queries, k)), v)
    return _tail(x, raw, w)


def cross_attention_block(q: Tensor, kv: Tensor, w: AttnWeights,
                          return_state: bool = True) -> tuple[Tensor, AttnState | None]:
    """Attend from ``q`` [..., L_q, d] to ``kv`` [..., L_kv, d].

    Returns the block output and, if requested, the raw attention state from
    which the output can be rebuilt or extended with more key/value rows.
    """
    if kv.ndim < 2 or kv.shape[-2] == 0:
        raise nx.ShapeError("cross-attention over an empty key/value set")
    if q.shape[-1] != w.wq.shape[0] or kv.shape[-1] != w.wq.shape[0]:
        raise nx.ShapeError(f"widths {q.shape[-1]}/{kv.shape[-1]} != d_model {w.wq.shape[0]}")
    queries = project_queries(q, w)
    k, v = project_kv(kv, w)
    s = _scores(queries, k)
    raw = nx.matmul(nx.softmax(s), v)
    out = _tail(q, raw, w)
    if not return_state:
        return out, None
    state = AttnState(raw, nx.logsumexp(s, axis=-1), kv.shape[-2], queries, fingerprint(w))
    return out, state


def empty_state(q: Tensor, w: AttnWeights) -> AttnState:
    return AttnState(None, None, 0, project_queries(q, w), fingerprint(w))


def absorb_scores(state: AttnState, s: Tensor, v: Tensor, stable: bool = True) -> AttnState:
    """Fold new scaled scores ``s`` [..., H, L_q, u] and values ``v`` [..., H, u, d_head].

    ``stable=False`` accumulates the normaliser in linear space instead of log
    space.  It is kept as a reference for stability checks and overflows for
    large scores.
    """
    u = s.shape[-1]
    if u == 0:
        return state
    if state.count == 0:
        return AttnState(nx.matmul(nx.softmax(s), v), nx.logsumexp(s, axis=-1), u,
                         state.queries, state.weights_id)
    if not stable:
        return _absorb_linear(state, s, v)
    log_c = state.log_c
    lc = nx.reshape(log_c, log_c.shape + (1,))
    t = nx.logsumexp(nx.sub(s, lc), axis=-1)
    new_log_c = nx.add(log_c, nx.softplus(t))
    nlc = nx.reshape(new_log_c, new_log_c.shape + (1,))
    keep = nx.exp(nx.sub(lc, nlc))
    fresh = nx.matmul(nx.exp(nx.sub(s, nlc)), v)
    emb = nx.add(nx.mul(keep, state.emb), fresh)
    return AttnState(emb, new_log_c, state.count + u, state.queries, state.weights_id)


def _absorb_linear(state: AttnState, s: Tensor, v: Tensor) -> AttnState:
    # overflow here is the expected failure; it surfaces as NonFiniteError
    with np.errstate(over="ignore", invalid="ignore"):
        return _absorb_linear_inner(state, s, v)


def _absorb_linear_inner(state: AttnState, s: Tensor, v: Tensor) -> AttnState:
    c = nx.exp(state.log_c)
    e = nx.exp(s)
    new_c = nx.add(c, nx.sum_(e, axis=-1))
    ratio = nx.div(c, new_c)
    emb = nx.add(
        nx.mul(nx.reshape(ratio, ratio.shape + (1,)), state.emb),
        nx.matmul(nx.div(e, nx.reshape(new_c, new_c.shape + (1,))), v),
    )
    return AttnState(emb, nx.log(new_c), state.count + s.shape[-1], state.queries, state.weights_id)


def state_update(state: AttnState, new_kv: Tensor, w: AttnWeights, stable: bool = True) -> AttnState:
    """Absorb ``new_kv`` rows; work is proportional to the new rows only."""
    if new_kv.shape[-2] == 0:
        return state
    if fingerprint(w) != state.weights_id:
        raise StaleStateError("attention weights changed since this state was built")
    k, v = project_kv(new_kv, w)
    return absorb_scores(state, _scores(state.queries, k), v, stable=stable)


def state_finish(state: AttnState, q: Tensor, w: AttnWeights) -> Tensor:
    """Block output for the absorbed key/value set, given the original queries ``q``."""
    if state.count == 0:
        raise EmptyStateError("attention state has absorbed no rows")
    if fingerprint(w) != state.weights_id:
        raise StaleStateError("attention weights changed since this state was built")
    return _tail(q, state.emb, w)


def iter_chunks(x: Tensor, chunk_size: int):
    n = x.shape[-2]
    for start in range(0, n, chunk_size):
        yield x[..., start:start + chunk_size, :]


def chunked_cross_attention(q: Tensor, kv: Tensor, w: AttnWeights,
                            chunk_size: int = 64) -> tuple[Tensor, AttnState]:
    """Same result as :func:`cross_attention_block`, in ``ceil(N / chunk_size)`` passes.

    Scratch memory depends on ``chunk_size``, the query count and the width,
    never on ``N``.
    """
    if chunk_size < 1:
        raise ValueError("chunk_size must be >= 1")
    n = kv.shape[-2]
    if n == 0:
        raise nx.ShapeError("cross-attention over an empty key/value set")
    if chunk_size >= n:
        return cross_attention_block(q, kv, w)
    state = empty_state(q, w)
    for chunk in iter_chunks(kv, chunk_size):
        state = state_update(state, chunk, w)
    return state_finish(state, q, w), state
