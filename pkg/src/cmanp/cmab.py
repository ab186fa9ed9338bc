"""Constant Memory Attention Block and stacks of them.

``CMAB(IEMB, INPUT) = SA2(CA2(IEMB, SA1(CA1(BEMB, INPUT))))`` where BEMB is a
learned latent set.  CA1 is the only part whose cost grows with the input, and
its queries (BEMB) never change, so its raw attention state can absorb new
input rows incrementally.  Everything downstream of CA1 has fixed size and is
recomputed on every update.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .attention import (
    AttnState,
    AttnWeights,
    StaleStateError,
    cross_attention_block,
    empty_state,
    fingerprint,
    init_attention,
    iter_chunks,
    self_attention_block,
    state_finish,
    state_update,
)
from .numerics import Tensor


@dataclass
class CmabWeights:
    bemb: Tensor  # [L_B, d_model]
    ca1: AttnWeights
    sa1: AttnWeights
    ca2: AttnWeights
    sa2: AttnWeights


@dataclass
class CmabCache:
    ca1_state: AttnState
    demb: Tensor
    oemb: Tensor
    weights_id: bytes


def init_cmab(rng: np.random.Generator, d_model: int, heads: int, d_ff: int, n_latents: int) -> CmabWeights:
    return CmabWeights(
        bemb=Tensor(rng.standard_normal((n_latents, d_model)), requires_grad=True),
        ca1=init_attention(rng, d_model, heads, d_ff, cross=True),
        sa1=init_attention(rng, d_model, heads, d_ff, cross=False),
        ca2=init_attention(rng, d_model, heads, d_ff, cross=True),
        sa2=init_attention(rng, d_model, heads, d_ff, cross=False),
    )


def _replay(iemb: Tensor, ca1_state: AttnState, w: CmabWeights, weights_id: bytes) -> tuple[Tensor, CmabCache]:
    demb = self_attention_block(state_finish(ca1_state, w.bemb, w.ca1), w.sa1)
    oemb = self_attention_block(cross_attention_block(iemb, demb, w.ca2, return_state=False)[0], w.sa2)
    return oemb, CmabCache(ca1_state, demb, oemb, weights_id)


def _as_chunks(inputs, chunk_size: int | None):
    if isinstance(inputs, Tensor):
        if inputs.shape[-2] == 0:
            raise nx.ShapeError("CMAB input is empty")
        return iter_chunks(inputs, chunk_size or inputs.shape[-2])
    return inputs


def cmab_forward(iemb: Tensor, inputs, w: CmabWeights, chunk_size: int | None = 64) -> tuple[Tensor, CmabCache]:
    """Run one block.  ``inputs`` is a tensor [..., N, d] or an iterable of row chunks.

    With ``chunk_size=None`` a tensor input is attended in one pass, which is
    the cheapest route for training.
    """
    oembs, caches = cmab_stack_forward(iemb, inputs, [w], chunk_size)
    return oembs[0], caches[0]


def cmab_update(cache: CmabCache, iemb: Tensor, new_input: Tensor, w: CmabWeights) -> tuple[Tensor, CmabCache]:
    if new_input.shape[-2] == 0:
        raise nx.ShapeError("update needs at least one new row")
    wid = fingerprint(w)
    if wid != cache.weights_id:
        raise StaleStateError("CMAB weights changed since this cache was built")
    state = state_update(cache.ca1_state, new_input, w.ca1)
    return _replay(iemb, state, w, wid)


def cmab_stack_forward(lemb0: Tensor, inputs, blocks: list[CmabWeights],
                       chunk_size: int | None = 64) -> tuple[list[Tensor], list[CmabCache]]:
    """``LEMB_i = CMAB_i(LEMB_{i-1}, INPUT)`` for i = 1..K.

    Every block's CA1 reads the same input, so a single streaming pass over
    the chunks feeds all K states; the fixed-size tails then run in order.
    """
    if not blocks:
        raise ValueError("need at least one CMAB block")
    if isinstance(inputs, Tensor) and chunk_size is None:
        return _stack_direct(lemb0, inputs, blocks)
    states = [empty_state(w.bemb, w.ca1) for w in blocks]
    for chunk in _as_chunks(inputs, chunk_size):
        states = [state_update(s, chunk, w.ca1) for s, w in zip(states, blocks)]
    if states[0].count == 0:
        raise nx.ShapeError("CMAB input is empty")
    return replay_stack(lemb0, states, blocks)


def _stack_direct(lemb0: Tensor, inputs: Tensor, blocks: list[CmabWeights]):
    if inputs.shape[-2] == 0:
        raise nx.ShapeError("CMAB input is empty")
    oembs, caches, iemb = [], [], lemb0
    for w in blocks:
        _, st = cross_attention_block(w.bemb, inputs, w.ca1)
        iemb, cache = _replay(iemb, st, w, fingerprint(w))
        oembs.append(iemb)
        caches.append(cache)
    return oembs, caches


def replay_stack(lemb0: Tensor, states: list[AttnState], blocks: list[CmabWeights]):
    """Rebuild every block's fixed-size tail from its CA1 state, in block order."""
    oembs, caches, iemb = [], [], lemb0
    for st, w in zip(states, blocks):
        iemb, cache = _replay(iemb, st, w, fingerprint(w))
        oembs.append(iemb)
        caches.append(cache)
    return oembs, caches


def absorb_stack(caches: list[CmabCache], new_inputs, blocks: list[CmabWeights],
                 chunk_size: int | None = 64) -> list[AttnState]:
    """Fold new rows into every block's CA1 state; the only input-sized work of an update."""
    for cache, w in zip(caches, blocks):
        if fingerprint(w) != cache.weights_id:
            raise StaleStateError("CMAB weights changed since this cache was built")
    states = [c.ca1_state for c in caches]
    absorbed = 0
    for chunk in _as_chunks(new_inputs, chunk_size):
        absorbed += chunk.shape[-2]
        states = [state_update(s, chunk, w.ca1) for s, w in zip(states, blocks)]
    if absorbed == 0:
        raise nx.ShapeError("update needs at least one new row")
    return states


def cmab_stack_update(caches: list[CmabCache], lemb0: Tensor, new_inputs, blocks: list[CmabWeights],
                      chunk_size: int | None = 64) -> tuple[list[Tensor], list[CmabCache]]:
    """``LEMB'_i = CMAB_i(LEMB'_{i-1}, INPUT + new)``: absorb, then replay the tails.

    Block i's CA2 sees the *updated* output of block i-1.  The original input
    is never needed.
    """
    return replay_stack(lemb0, absorb_stack(caches, new_inputs, blocks, chunk_size), blocks)


def stack_training_forward(lemb0: Tensor, inputs: Tensor, blocks: list[CmabWeights]) -> list[Tensor]:
    """Differentiable forward with no caches kept; used by the training loop."""
    oembs, iemb = [], lemb0
    for w in blocks:
        x, _ = cross_attention_block(w.bemb, inputs, w.ca1, return_state=False)
        demb = self_attention_block(x, w.sa1)
        iemb = self_attention_block(cross_attention_block(iemb, demb, w.ca2, return_state=False)[0], w.sa2)
        oembs.append(iemb)
    return oembs
