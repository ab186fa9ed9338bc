"""CMAB composition, caches, stacked updates and gradients."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cmanp import numerics as nx
from cmanp.attention import StaleStateError, cross_attention_block, self_attention_block
from cmanp.cmab import (
    cmab_forward,
    cmab_stack_forward,
    cmab_stack_update,
    cmab_update,
    init_cmab,
    stack_training_forward,
)
from cmanp.numerics import Tensor

from conftest import central_diff, max_rel_err

D, H, FF, LB, LI = 8, 2, 16, 5, 3


def blocks(k=1, seed=0):
    r = np.random.default_rng(seed)
    return [init_cmab(r, D, H, FF, LB) for _ in range(k)]


def lemb0(seed=1):
    return Tensor(np.random.default_rng(seed).standard_normal((LI, D)))


def composed(iemb, x, w):
    """SA(CA(IEMB, SA(CA(BEMB, X)))) straight from the block functions."""
    demb = self_attention_block(cross_attention_block(w.bemb, x, w.ca1, return_state=False)[0], w.sa1)
    return self_attention_block(cross_attention_block(iemb, demb, w.ca2, return_state=False)[0], w.sa2)


class TestCmabForward:
    def test_matches_composition(self, rng):
        w = blocks()[0]
        x = Tensor(rng.standard_normal((9, D)))
        out, cache = cmab_forward(lemb0(), x, w, chunk_size=4)
        assert np.abs(out.data - composed(lemb0(), x, w).data).max() < 1e-10
        assert cache.ca1_state.count == 9

    def test_permutation_invariant(self, rng):
        w = blocks()[0]
        x = rng.standard_normal((12, D))
        a = cmab_forward(lemb0(), Tensor(x), w)[0].data
        b = cmab_forward(lemb0(), Tensor(x[rng.permutation(12)]), w)[0].data
        assert np.abs(a - b).max() < 1e-9

    def test_single_row(self, rng):
        out, _ = cmab_forward(lemb0(), Tensor(rng.standard_normal((1, D))), blocks()[0])
        assert out.shape == (LI, D)
        assert np.isfinite(out.data).all()

    def test_chunked_vs_direct(self, rng):
        w = blocks()[0]
        x = Tensor(rng.standard_normal((11, D)))
        a = cmab_forward(lemb0(), x, w, chunk_size=4)[0].data
        b = cmab_forward(lemb0(), x, w, chunk_size=None)[0].data
        assert np.abs(a - b).max() < 1e-10

    def test_empty_input(self):
        with pytest.raises(nx.ShapeError):
            cmab_forward(lemb0(), Tensor(np.zeros((0, D))), blocks()[0])

    def test_cache_reproducible(self, rng):
        w = blocks()[0]
        x = Tensor(rng.standard_normal((6, D)))
        out, cache = cmab_forward(lemb0(), x, w)
        demb = self_attention_block(cross_attention_block(w.bemb, x, w.ca1)[0], w.sa1)
        assert np.abs(cache.demb.data - demb.data).max() < 1e-12
        assert np.array_equal(cache.oemb.data, out.data)


class TestCmabUpdate:
    def test_duplicate_row(self, rng):
        w = blocks()[0]
        x = rng.standard_normal((5, D))
        _, cache = cmab_forward(lemb0(), Tensor(x), w)
        up, _ = cmab_update(cache, lemb0(), Tensor(x[2:3]), w)
        ref = composed(lemb0(), Tensor(np.concatenate([x, x[2:3]])), w).data
        assert np.abs(up.data - ref).max() < 1e-10

    def test_five_single_updates(self, rng):
        w = blocks()[0]
        x = rng.standard_normal((6, D))
        out, cache = cmab_forward(lemb0(), Tensor(x[:1]), w)
        for i in range(1, 6):
            out, cache = cmab_update(cache, lemb0(), Tensor(x[i:i + 1]), w)
        assert np.abs(out.data - composed(lemb0(), Tensor(x), w).data).max() < 1e-10

    def test_ops_independent_of_absorbed(self, rng):
        w = blocks()[0]
        new = Tensor(rng.standard_normal((4, D)))
        counts = []
        for n in (100, 10000):
            _, cache = cmab_forward(lemb0(), Tensor(rng.standard_normal((n, D))), w, chunk_size=256)
            with nx.track("u") as tr:
                cmab_update(cache, lemb0(), new, w)
            counts.append(tr.ops)
        assert counts[0] == counts[1]

    def test_stale(self, rng):
        w = blocks()[0]
        _, cache = cmab_forward(lemb0(), Tensor(rng.standard_normal((3, D))), w)
        w.bemb.data = w.bemb.data * 1.01
        with pytest.raises(StaleStateError):
            cmab_update(cache, lemb0(), Tensor(rng.standard_normal((1, D))), w)

    def test_empty_update(self, rng):
        w = blocks()[0]
        _, cache = cmab_forward(lemb0(), Tensor(rng.standard_normal((3, D))), w)
        with pytest.raises(nx.ShapeError):
            cmab_update(cache, lemb0(), Tensor(np.zeros((0, D))), w)


class TestStack:
    def test_k1_is_single_block(self, rng):
        ws = blocks(1)
        x = Tensor(rng.standard_normal((7, D)))
        outs, _ = cmab_stack_forward(lemb0(), x, ws)
        assert np.array_equal(outs[0].data, cmab_forward(lemb0(), x, ws[0])[0].data)

    def test_sequential_composition(self, rng):
        ws = blocks(3)
        x = Tensor(rng.standard_normal((7, D)))
        outs, _ = cmab_stack_forward(lemb0(), x, ws, chunk_size=3)
        ref = lemb0()
        for w, o in zip(ws, outs):
            ref = composed(ref, x, w)
            assert np.abs(o.data - ref.data).max() < 1e-10

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 3), st.integers(4, 64), st.integers(1, 16), st.integers(1, 9), st.integers(0, 2**31))
    def test_update_equals_forward_on_union(self, k, n, u, chunk, seed):
        r = np.random.default_rng(seed)
        ws = blocks(k, seed % 11)
        x = r.standard_normal((n + u, D))
        _, caches = cmab_stack_forward(lemb0(), Tensor(x[:n]), ws, chunk_size=chunk)
        outs, _ = cmab_stack_update(caches, lemb0(), Tensor(x[n:]), ws, chunk_size=chunk)
        ref, _ = cmab_stack_forward(lemb0(), Tensor(x), ws, chunk_size=None)
        for a, b in zip(outs, ref):
            assert np.abs(a.data - b.data).max() < 1e-10

    def test_shared_lemb0_over_batch(self, rng):
        ws = blocks(2)
        x = rng.standard_normal((3, 5, D))
        outs, _ = cmab_stack_forward(lemb0(), Tensor(x), ws)
        for b in range(3):
            single, _ = cmab_stack_forward(lemb0(), Tensor(x[b]), ws)
            assert np.abs(outs[1].data[b] - single[1].data).max() < 1e-12

    def test_empty_block_list(self, rng):
        with pytest.raises(ValueError):
            cmab_stack_forward(lemb0(), Tensor(rng.standard_normal((2, D))), [])


class TestTrainingPath:
    def test_matches_deployment(self, rng):
        ws = blocks(2)
        x = Tensor(rng.standard_normal((6, D)))
        a = stack_training_forward(lemb0(), x, ws)
        b, _ = cmab_stack_forward(lemb0(), x, ws, chunk_size=2)
        for p, q in zip(a, b):
            assert np.abs(p.data - q.data).max() < 1e-10

    def test_gradients_every_weight(self, rng):
        ws = blocks(1)
        x = rng.standard_normal((4, D))
        init = Tensor(rng.standard_normal((2, D)), requires_grad=True)
        proj = rng.standard_normal((2, D))
        leaves = [init] + [t for _, t in nx.named_tensors(ws)]

        def loss():
            return nx.sum_(nx.mul(stack_training_forward(init, Tensor(x), ws)[0], proj))

        grads = nx.grad(loss(), leaves)
        for t, g in zip(leaves, grads):
            assert g.shape == t.shape
            num = central_diff(lambda a: loss().item(), [t.data])[0]
            assert max_rel_err(g, num) < 1e-4
