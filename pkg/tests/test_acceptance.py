"""Acceptance criteria, one test per criterion.

Each test records a PASS/FAIL line that is printed in the terminal summary.
Criteria 9-11 read the trained checkpoints under ``artifacts/`` (override
with ``CMANP_ARTIFACTS``); ``artifacts/train_desk.sh`` produces them.
"""

import math
import os
import time
from dataclasses import replace
from pathlib import Path

import mpmath
import numpy as np
import pytest

from cmanp import numerics as nx
from cmanp.attention import AttnState, absorb_scores
from cmanp.bench import memory_sweep, update_sweep
from cmanp.checkpoint import load_checkpoint, params_equal, save_checkpoint
from cmanp.cmab import stack_training_forward
from cmanp.model import (
    AndPrediction,
    ModelConfig,
    _embed_pairs,
    condition,
    forward_train,
    init_params,
    predict_and,
    query_diagonal,
    query_joint,
    training_loss,
    update,
)
from cmanp.tasks import GpTaskConfig
from cmanp.trainer import TrainConfig, constant_gaussian_baseline, eval_batches, evaluate, train

from conftest import ACCEPTANCE

ARTIFACTS = Path(os.environ.get("CMANP_ARTIFACTS", Path(__file__).resolve().parents[1] / "artifacts"))
DESK = ModelConfig()


@pytest.fixture
def verdict(request):
    """Record ``(n, title, ok, detail)``; a test that dies before recording counts as FAIL."""
    slot = {}

    def record(n, title, ok, detail):
        slot["n"] = n
        ACCEPTANCE[n] = (title, bool(ok), detail)
        return bool(ok)

    yield record
    n = getattr(request.function, "criterion", None)
    if n is not None and "n" not in slot:
        ACCEPTANCE[n] = (request.function.__doc__.strip().splitlines()[0], False, "errored before a verdict")


def criterion(n):
    def mark(fn):
        fn.criterion = n
        return fn
    return mark


def _xy(rng, n, cfg=DESK):
    x = rng.uniform(-2, 2, (n, cfg.x_dim))
    return x, np.sin(2 * x) + 0.3 * rng.standard_normal((n, cfg.y_dim))


def _trained(name, variant):
    path = ARTIFACTS / name / "checkpoint.bin"
    if not path.is_file():
        pytest.fail(f"missing {path}; run artifacts/train_desk.sh")
    ck = load_checkpoint(path)
    assert ck.config == replace(DESK, variant=variant), "checkpoint is not the desk-scale configuration"
    return ck


@criterion(1)
def test_update_equals_recompute(verdict):
    """update equals full recompute"""
    rng = np.random.default_rng(101)
    t0, worst, bad = time.perf_counter(), 0.0, 0
    for _ in range(200):
        K = int(rng.integers(1, 4))
        cfg = ModelConfig(K=K, L_I=4, L_B=6, d_model=16, heads=2, d_ff=32, B_C=int(rng.integers(1, 9)))
        p = init_params(cfg, int(rng.integers(1 << 31)))
        n, u = int(rng.integers(4, 65)), int(rng.integers(1, 17))
        x, y = _xy(rng, n + u, cfg)
        got = update(p, cfg, condition(p, cfg, x[:n], y[:n]), x[n:], y[n:]).lembs
        # independent route: dense recompute through the training path on the union
        with nx.no_grad():
            ref = stack_training_forward(p.lemb0, _embed_pairs(p, x, y), p.blocks)
        assert len(got) == len(ref) == K
        d = max(float(np.abs(a.data - b.data).max()) for a, b in zip(got, ref))
        worst, bad = max(worst, d), bad + (d > 1e-10)
    secs = time.perf_counter() - t0
    ok = verdict(1, "update equals full recompute", bad == 0 and secs < 60,
                 f"200 instances, {bad} over 1e-10, max abs diff {worst:.1e}, {secs:.1f}s")
    assert ok


@criterion(2)
def test_constant_memory_conditioning(verdict):
    """constant-memory conditioning"""
    t0 = time.perf_counter()
    p = init_params(DESK, 0)
    ns = (256, 1024, 4096)
    chunked = [r.peak_bytes for r in memory_sweep(p, DESK, ns, seed=2)]
    control = [r.peak_bytes for r in memory_sweep(p, DESK, ns, seed=2, chunked=False)]
    secs = time.perf_counter() - t0
    ok = verdict(2, "constant-memory conditioning",
                 len(set(chunked)) == 1 and control[0] < control[1] < control[2] and secs < 60,
                 f"peak bytes chunked {chunked}, unchunked control {control}, {secs:.1f}s")
    assert ok


@criterion(3)
def test_constant_per_datapoint_updates(verdict):
    """constant per-datapoint update cost"""
    p = init_params(DESK, 0)
    by_prior, by_u = update_sweep(p, DESK, (100, 10000), 16, (2048, 4096, 8192), seed=3)
    equal = by_prior[0].ops == by_prior[1].ops
    total = [b.ops / a.ops for a, b in zip(by_u, by_u[1:])]
    absorb = [b.absorb_ops / a.absorb_ops for a, b in zip(by_u, by_u[1:])]
    in_range = all(1.8 <= r <= 2.2 for r in total + absorb)
    ok = verdict(3, "constant per-datapoint update cost", equal and in_range,
                 f"ops at prior N 100/10000: {by_prior[0].ops}/{by_prior[1].ops}; doubling u "
                 f"{[r.u for r in by_u]} gives total ratios {[round(r, 3) for r in total]}, "
                 f"absorb ratios {[round(r, 3) for r in absorb]}, replay constant {by_u[0].replay_ops}")
    assert ok


@criterion(4)
def test_chunk_invariance(verdict):
    """chunk invariance"""
    rng = np.random.default_rng(104)
    p = init_params(DESK, 4)
    worst, cases = 0.0, 0
    for n in (16, 37, 101):
        x, y = _xy(rng, n)
        xt = rng.uniform(-2, 2, (9, 1))
        with nx.no_grad():
            direct = forward_train(p, DESK, x, y, xt)
            lref = stack_training_forward(p.lemb0, _embed_pairs(p, x, y), p.blocks)
        for bc in (1, 4, 16, n):
            st = condition(p, DESK, x, y, chunk_size=bc)
            pred = query_diagonal(p, DESK, st, xt)
            d = max(float(np.abs(pred.mean.data - direct.mean.data).max()),
                    float(np.abs(pred.var.data - direct.var.data).max()),
                    *(float(np.abs(a.data - b.data).max()) for a, b in zip(st.lembs, lref)))
            worst, cases = max(worst, d), cases + 1
    ok = verdict(4, "chunk invariance", worst <= 1e-10,
                 f"N in (16, 37, 101) x B_C in (1, 4, 16, N): {cases} cases, max abs diff {worst:.1e}")
    assert ok


@criterion(5)
def test_context_permutation_invariance(verdict):
    """context order invariance"""
    rng = np.random.default_rng(105)
    p = init_params(DESK, 5)
    x, y = _xy(rng, 45)
    xt = rng.uniform(-2, 2, (12, 1))
    base = query_diagonal(p, DESK, condition(p, DESK, x, y), xt)
    worst = 0.0
    for _ in range(100):
        perm = rng.permutation(len(x))
        pred = query_diagonal(p, DESK, condition(p, DESK, x[perm], y[perm]), xt)
        worst = max(worst, float(np.abs(pred.mean.data - base.mean.data).max()),
                    float(np.abs(pred.var.data - base.var.data).max()))
    ok = verdict(5, "context order invariance", worst <= 1e-8,
                 f"100 permutations of 45 points, max abs diff {worst:.1e}")
    assert ok


@criterion(6)
def test_target_equivariance(verdict):
    """target equivariance"""
    rng = np.random.default_rng(106)
    p = init_params(DESK, 6)
    st = condition(p, DESK, *_xy(rng, 30))
    xt = rng.uniform(-2, 2, (25, 1))
    base = query_diagonal(p, DESK, st, xt)
    exact = 0
    for _ in range(50):
        perm = rng.permutation(len(xt))
        pred = query_diagonal(p, DESK, st, xt[perm])
        exact += np.array_equal(pred.mean.data, base.mean.data[perm]) and np.array_equal(pred.var.data,
                                                                                         base.var.data[perm])
    ok = verdict(6, "target equivariance", exact == 50, f"{exact}/50 permutations bitwise equal")
    assert ok


def _mp_reference(s, v):
    """Softmax-weighted values and log-normaliser in 50-digit arithmetic."""
    mpmath.mp.dps = 50
    H, L, n = s.shape
    emb = np.zeros((H, L, v.shape[-1]))
    log_c = np.zeros((H, L))
    for h in range(H):
        for i in range(L):
            w = [mpmath.exp(mpmath.mpf(float(t))) for t in s[h, i]]
            c = mpmath.fsum(w)
            log_c[h, i] = float(mpmath.log(c))
            for j in range(v.shape[-1]):
                emb[h, i, j] = float(mpmath.fsum(wk * mpmath.mpf(float(vk)) for wk, vk in zip(w, v[h, :, j])) / c)
    return emb, log_c


def _fold(s_chunks, v_chunks, stable):
    H, L, _ = s_chunks[0].shape
    st = AttnState(None, None, 0, nx.Tensor(np.zeros((H, L, v_chunks[0].shape[-1]))), b"")
    for s, v in zip(s_chunks, v_chunks):
        st = absorb_scores(st, nx.Tensor(s), nx.Tensor(v), stable=stable)
    return st


@criterion(7)
@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numerical_stability(verdict):
    """numerical stability of the rolling update"""
    rng = np.random.default_rng(107)
    H, L, dh = 2, 3, 4
    # scores near 50 against an extended-precision oracle
    s50 = [rng.uniform(48, 52, (H, L, 9)) for _ in range(4)]
    v50 = [rng.standard_normal((H, 9, dh)) for _ in range(4)]
    st = _fold(s50, v50, stable=True)
    emb, log_c = _mp_reference(np.concatenate(s50, -1), np.concatenate(v50, -2))
    rel50 = max(float(np.abs(st.emb.data - emb).max() / np.abs(emb).max()),
                float(np.abs(st.log_c.data - log_c).max() / np.abs(log_c).max()))
    # scores up to 700: 32768 rows at exactly 700 have a closed form (log C = 700 + log n, emb = mean of v)
    s700 = [np.full((H, L, 4096), 700.0) for _ in range(8)]
    v700 = [rng.standard_normal((H, 4096, dh)) for _ in range(8)]
    st700 = _fold(s700, v700, stable=True)
    finite = bool(np.isfinite(st700.emb.data).all() and np.isfinite(st700.log_c.data).all())
    mean_v = np.concatenate(v700, -2).mean(-2)[:, None, :]
    rel700 = max(float(np.abs(st700.emb.data - mean_v).max() / np.abs(mean_v).max()),
                 float(np.abs(st700.log_c.data - (700 + math.log(32768))).max() / 700))
    # mixed magnitudes in [-700, 700] stay finite too
    mixed = _fold([rng.uniform(-700, 700, (H, L, 512)) for _ in range(4)],
                  [rng.standard_normal((H, 512, dh)) for _ in range(4)], stable=True)
    finite &= bool(np.isfinite(mixed.emb.data).all() and np.isfinite(mixed.log_c.data).all())
    # the linear-space variant must break on the same input
    try:
        naive = _fold(s700, v700, stable=False)
        naive_fails = not (np.isfinite(naive.emb.data).all() and np.abs(naive.emb.data - mean_v).max() <= 1e-6)
    except nx.NonFiniteError:
        naive_fails = True
    ok = verdict(7, "numerical stability", rel50 <= 1e-6 and finite and rel700 <= 1e-6 and naive_fails,
                 f"rel err vs 50-digit oracle at ~50: {rel50:.1e}; finite up to 700: {finite} "
                 f"(rel err {rel700:.1e}); linear-space variant fails: {naive_fails}")
    assert ok


def _fd_groups(cfg, seed):
    rng = np.random.default_rng(seed)
    p = init_params(cfg, seed)
    x, y = _xy(rng, 2 * 11, cfg)
    batch = (x[:12].reshape(2, 6, 1), y[:12].reshape(2, 6, 1), x[12:].reshape(2, 5, 1), y[12:].reshape(2, 5, 1))
    named = p.named()
    grads = nx.grad(training_loss(p, cfg, *batch), [t for _, t in named])
    h, out = 1e-5, []
    for (name, t), g in zip(named, grads):
        picks = {tuple(int(i) for i in np.unravel_index(np.abs(g).argmax(), g.shape))}
        while len(picks) < min(3, g.size):
            picks.add(tuple(int(rng.integers(n)) for n in t.shape))
        num, ana = [], []
        orig = t.data
        for idx in picks:
            vals = []
            for sign in (1.0, -1.0):
                d = orig.copy()
                d[idx] += sign * h
                t.data = d
                with nx.no_grad():
                    vals.append(training_loss(p, cfg, *batch).item())
            t.data = orig
            num.append((vals[0] - vals[1]) / (2 * h))
            ana.append(g[idx])
        num, ana = np.array(num), np.array(ana)
        scale = max(np.abs(num).max(), np.abs(ana).max(), 1e-5)
        out.append((name, float(np.abs(num - ana).max() / scale)))
    return out


@criterion(8)
def test_gradient_correctness(verdict):
    """autodiff matches finite differences"""
    small = ModelConfig(K=1, L_I=4, L_B=4, d_model=16, heads=2, d_ff=32, B_C=4, rank=2)
    errs = _fd_groups(small, 8) + _fd_groups(replace(small, variant="and"), 9)
    name, worst = max(errs, key=lambda e: e[1])
    ok = verdict(8, "autodiff matches finite differences", worst < 1e-4,
                 f"{len(errs)} parameter tensors over both variants, max rel err {worst:.1e} ({name})")
    assert ok


@criterion(9)
@pytest.mark.slow
def test_desk_training(verdict):
    """trained model conditions on context"""
    ck = _trained("diagonal", "diagonal")
    tcfg, tasks = TrainConfig(), GpTaskConfig()
    trained = evaluate(ck.params, ck.config, tasks, tcfg, "rbf")
    untrained = evaluate(init_params(ck.config, tcfg.seed), ck.config, tasks, tcfg, "rbf")
    base = constant_gaussian_baseline(eval_batches(tasks, tcfg, "rbf"))
    best = max(base.values(), key=lambda r: r.mean)
    ok = verdict(9, "trained model conditions on context",
                 ck.step >= 20000 and trained.n_tasks == 1000 and trained.mean >= untrained.mean + 1.0
                 and trained.mean > best.mean,
                 f"{ck.step} steps; RBF LL {trained.mean:.3f} +- {trained.stderr:.3f} vs untrained "
                 f"{untrained.mean:.3f} and best constant baseline {best.mean:.3f} ({best.mode}), 1000 tasks")
    assert ok


@pytest.fixture(scope="module")
def and_eval():
    ck = _trained("and", "and")
    checks = {"sigmas": 0, "cholesky_fail": 0, "tasks": 0, "nonfinite": 0}

    def inspect(batch, res: AndPrediction):
        for cov in res.covariances:
            for c in cov.reshape(-1, *cov.shape[-2:]):
                checks["sigmas"] += 1
                try:
                    np.linalg.cholesky(c)
                except np.linalg.LinAlgError:
                    checks["cholesky_fail"] += 1
        checks["tasks"] += batch.size
        checks["nonfinite"] += int((~np.isfinite(res.block_mean_loglik).all(-1)).sum())

    tcfg, tasks = TrainConfig(), GpTaskConfig()
    # the verdict scores the autoregressive likelihood (observed targets fed back between blocks);
    # the single sampled trajectory used at deployment is reported alongside
    chain, sampled = {}, {}
    for kernel in ("rbf", "matern52"):
        chain[kernel] = {bq: evaluate(ck.params, ck.config, tasks, tcfg, kernel, mode="and", block_size=bq,
                                      feedback="observed", inspect=inspect) for bq in (1, 5, 0)}
        sampled[kernel] = {bq: evaluate(ck.params, ck.config, tasks, tcfg, kernel, mode="and", block_size=bq,
                                        inspect=inspect) for bq in (1, 5)}
        sampled[kernel][0] = chain[kernel][0]
    return ck, chain, sampled, checks


@criterion(10)
@pytest.mark.slow
def test_and_block_ordering(verdict, and_eval):
    """smaller AND blocks are no worse"""
    ck, chain, sampled, _ = and_eval
    fmt = "B_Q=1 {:.3f}+-{:.3f}, 5 {:.3f}+-{:.3f}, M {:.3f}+-{:.3f}"
    ok, parts = ck.step >= 20000, [f"{ck.step} steps"]
    for kernel in ("rbf", "matern52"):
        order = [chain[kernel][b] for b in (1, 5, 0)]
        ok &= order[0].n_tasks == 1000
        ok &= all(a.mean >= b.mean - max(a.stderr, b.stderr) for a, b in zip(order, order[1:]))
        parts.append(f"{kernel} autoregressive LL " + fmt.format(*(v for r in order for v in (r.mean, r.stderr)))
                     + " (sampled trajectory " + fmt.format(*(v for b in (1, 5, 0) for v in (sampled[kernel][b].mean,
                                                                                              sampled[kernel][b].stderr)))
                     + ")")
    ok = verdict(10, "smaller AND blocks are no worse", ok, "; ".join(parts))
    assert ok


@criterion(11)
@pytest.mark.slow
def test_joint_covariance_validity(verdict, and_eval):
    """every joint covariance is usable"""
    _, chain, sampled, checks = and_eval
    finite = all(np.isfinite(r.per_task).all() for d in (chain, sampled) for k in d for r in d[k].values())
    ok = verdict(11, "every joint covariance is usable",
                 checks["cholesky_fail"] == 0 and checks["nonfinite"] == 0 and finite and checks["tasks"] == 10000,
                 f"{checks['sigmas']} covariances over {checks['tasks']} task evaluations "
                 f"(both kernels; B_Q 1, 5, M observed; 1, 5 sampled): "
                 f"{checks['cholesky_fail']} Cholesky failures, {checks['nonfinite']} non-finite joint NLLs")
    assert ok


@criterion(12)
def test_checkpoint_round_trip(verdict, tmp_path):
    """checkpoint round trip is bitwise"""
    rng = np.random.default_rng(112)
    x, y = _xy(rng, 40)
    xt = rng.uniform(-2, 2, (11, 1))
    same = []
    for variant in ("diagonal", "and"):
        cfg = replace(DESK, variant=variant)
        p = init_params(cfg, 12)
        _, _, adam = train(p, cfg, TrainConfig(steps=3, batch_size=4, eval_interval=10**6, timing=False))
        before = _predictions(p, cfg, x, y, xt)
        save_checkpoint(tmp_path / f"{variant}.bin", cfg, p, 3, adam)
        ck = load_checkpoint(tmp_path / f"{variant}.bin")
        after = _predictions(ck.params, ck.config, x, y, xt)
        same.append(params_equal(p, ck.params) and len(before) == len(after)
                    and all(np.array_equal(a, b) for a, b in zip(before, after)))
    ok = verdict(12, "checkpoint round trip is bitwise", all(same),
                 f"diagonal {same[0]}, and {same[1]} (parameters and every prediction array)")
    assert ok


def _predictions(p, cfg, x, y, xt):
    st = condition(p, cfg, x[:30], y[:30])
    out = [query_diagonal(p, cfg, st, xt).mean.data, query_diagonal(p, cfg, st, xt).var.data]
    st2 = update(p, cfg, st, x[30:], y[30:])
    out += [query_diagonal(p, cfg, st2, xt).mean.data]
    if cfg.variant == "and":
        j = query_joint(p, cfg, st2, xt)
        out += [j.mean.data, j.covariance()]
        res = predict_and(p, cfg, st, xt, rng=np.random.default_rng(0), ys=np.sin(xt))
        out += [res.mean, res.loglik_per_point, *res.samples]
    return out
