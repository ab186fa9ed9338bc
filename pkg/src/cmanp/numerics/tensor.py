"""Dense float64 tensors with a reverse-mode tape.

Every op is a pure function returning a new :class:`Tensor`.  When gradient
recording is on and an input requires grad, the output keeps a reference to
its inputs plus a closure mapping the output cotangent to input cotangents.
Closures never capture the output itself, so graphs are acyclic in memory
and CPython frees intermediates deterministically; the scratch-byte counters
in :mod:`cmanp.numerics.instrument` depend on that.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

from . import instrument

_GRAD_ENABLED = True
_ROW_EXACT = False


class NonFiniteError(FloatingPointError):
    """Raised when an op would store NaN or Inf."""


class ShapeError(ValueError):
    pass


class CovarianceError(np.linalg.LinAlgError):
    """Raised when a covariance matrix fails Cholesky factorisation."""


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def row_exact():
    """Route matmuls through a BLAS-free kernel.

    OpenBLAS picks different kernels for single-row and multi-row products, so
    the same row can round differently depending on what it is batched with.
    Inside this context every output row is a function of its own input row
    only, bit for bit.
    """
    global _ROW_EXACT
    prev = _ROW_EXACT
    _ROW_EXACT = True
    try:
        yield
    finally:
        _ROW_EXACT = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def _check_finite(arr: np.ndarray, what: str) -> None:
    # a single reduction is much cheaper than isfinite().all(); only an
    # overflowing sum of finite values needs the exact check
    with np.errstate(over="ignore", invalid="ignore"):
        s = arr.sum()
    if not math.isfinite(s) and not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values produced by {what}")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_grad_fn", "_trackers", "_nbytes")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, *, _op: str = "tensor"):
        arr = np.asarray(data, dtype=np.float64)
        _check_finite(arr, _op)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._grad_fn = None
        self._trackers = instrument.on_alloc(arr.nbytes)
        self._nbytes = arr.nbytes

    def __del__(self):
        # __init__ may have raised before the allocation was charged
        trackers = getattr(self, "_trackers", None)
        if trackers:
            instrument.on_free(trackers, self._nbytes)

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return self.data.shape[0]

    # -- operator sugar --------------------------------------------------
    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, op: str, parents: tuple, grad_fn: Callable | None) -> Tensor:
    out = Tensor(data, _op=op)
    if _GRAD_ENABLED and grad_fn is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._grad_fn = grad_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    instrument.count_ops(out.size)
    sa, sb = a.shape, b.shape
    return _result(out, "add", (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data
    instrument.count_ops(out.size)
    sa, sb = a.shape, b.shape
    return _result(out, "sub", (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad * bd
    instrument.count_ops(out.size)
    return _result(
        out, "mul", (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = ad / bd
    instrument.count_ops(out.size)

    def grad_fn(g):
        ga = g / bd
        return _unbroadcast(ga, ad.shape), _unbroadcast(-ga * out, bd.shape)

    return _result(out, "div", (a, b), grad_fn)


def neg(a) -> Tensor:
    a = as_tensor(a)
    instrument.count_ops(a.size)
    return _result(-a.data, "neg", (a,), lambda g: (-g,))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    with np.errstate(all="ignore"):
        out = ad**p
    instrument.count_ops(out.size)
    return _result(out, "power", (a,), lambda g: (g * p * ad ** (p - 1),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    instrument.count_ops(out.size)
    return _result(out, "exp", (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(ad)
    instrument.count_ops(out.size)
    return _result(out, "log", (a,), lambda g: (g / ad,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)
    instrument.count_ops(out.size)
    return _result(out, "sqrt", (a,), lambda g: (g * 0.5 / out,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    out = np.maximum(ad, 0.0)
    instrument.count_ops(out.size)
    return _result(out, "relu", (a,), lambda g: (g * (ad > 0),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def softplus(a) -> Tensor:
    """log(1 + exp(x)) without overflow: max(x, 0) + log1p(exp(-|x|))."""
    a = as_tensor(a)
    ad = a.data
    out = np.maximum(ad, 0.0) + np.log1p(np.exp(-np.abs(ad)))
    instrument.count_ops(out.size)
    return _result(out, "softplus", (a,), lambda g: (g * _sigmoid(ad),))


def where_const(mask: np.ndarray, a, fill: float) -> Tensor:
    """``a`` where ``mask`` holds, else the constant ``fill`` (no gradient)."""
    a = as_tensor(a)
    out = np.where(mask, a.data, fill)
    instrument.count_ops(out.size)
    return _result(out, "where", (a,), lambda g: (np.where(mask, g, 0.0),))


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def _mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if _ROW_EXACT:
        return np.einsum("...ik,...kj->...ij", a, b, optimize=False)
    return np.matmul(a, b)


def matmul(a, b) -> Tensor:
    """Matrix product with numpy batch broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {ad.shape} and {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {ad.shape} @ {bd.shape}")
    out = _mm(ad, bd)
    instrument.count_ops(out.size * ad.shape[-1])

    def grad_fn(g):
        if bd.ndim == 2 and ad.ndim > 2:
            # weight matrix shared over the batch: fold leading axes
            k = ad.shape[-1]
            gb = ad.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            ga = g @ bd.T
            return ga, gb
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _result(out, "matmul", (a, b), grad_fn)


def mvn_lowrank_nll(y, mean, factor, diag) -> Tensor:
    """Negative log density of ``y`` under N(mean, F F^T + diag(d)).

    Shapes: ``y``, ``mean``, ``diag`` are ``[..., n]``; ``factor`` is
    ``[..., n, r]``.  Returns ``[...]``, summed over the ``n`` coordinates.
    Evaluated through a Cholesky factor of the covariance; a failed
    factorisation raises :class:`CovarianceError`.
    """
    y, mean, factor, diag = (as_tensor(t) for t in (y, mean, factor, diag))
    F, d = factor.data, diag.data
    n = y.shape[-1]
    cov = np.matmul(F, np.swapaxes(F, -1, -2))
    idx = np.arange(n)
    cov[..., idx, idx] += d
    try:
        L = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise CovarianceError(f"covariance is not positive definite: {exc}") from None
    resid = y.data - mean.data
    z = np.linalg.solve(L, resid[..., None])
    alpha = np.linalg.solve(np.swapaxes(L, -1, -2), z)[..., 0]
    logdet = 2.0 * np.log(L[..., idx, idx]).sum(-1)
    out = 0.5 * ((z[..., 0] ** 2).sum(-1) + logdet + n * math.log(2.0 * math.pi))
    instrument.count_ops(cov.size * n)

    def grad_fn(g):
        Linv = np.linalg.inv(L)
        cinv = np.matmul(np.swapaxes(Linv, -1, -2), Linv)
        gs = np.asarray(g)[..., None, None]
        G = 0.5 * (cinv - alpha[..., :, None] * alpha[..., None, :]) * gs
        ga = alpha * np.asarray(g)[..., None]
        return ga, -ga, 2.0 * np.matmul(G, F), G[..., idx, idx].copy()

    return _result(out, "mvn_lowrank_nll", (y, mean, factor, diag), grad_fn)


# ---------------------------------------------------------------------------
# reductions and normalisers
# ---------------------------------------------------------------------------


def _expand_like(g: np.ndarray, shape: tuple, axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else axis
        axes = tuple(a % len(shape) for a in axes)
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))
    instrument.count_ops(a.size)
    shape = a.shape
    return _result(out, "sum", (a,), lambda g: (_expand_like(g, shape, axis, keepdims),))


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(sum_(a, axis, keepdims), 1.0 / n)


def softmax(a, axis: int = -1) -> Tensor:
    """Softmax with max-subtraction; rows sum to one."""
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    instrument.count_ops(3 * out.size)
    return _result(
        out, "softmax", (a,),
        lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),),
    )


def softmax_rows(a) -> Tensor:
    return softmax(a, axis=-1)


def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if a.data.shape[axis] == 0:
        raise ShapeError("logsumexp of an empty axis")
    m = a.data.max(axis=axis, keepdims=True)
    s = np.exp(a.data - m).sum(axis=axis, keepdims=True)
    out_k = m + np.log(s)
    out = out_k if keepdims else np.squeeze(out_k, axis=axis)
    instrument.count_ops(2 * a.size)

    def grad_fn(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        return (gk * np.exp(a.data - out_k),)

    return _result(out, "logsumexp", (a,), grad_fn)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis; a constant row maps to ``bias``."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if gain.shape[-1] != x.shape[-1] or bias.shape[-1] != x.shape[-1]:
        raise ShapeError(f"layer_norm affine shape {gain.shape} does not match {x.shape}")
    xd = x.data
    mu = xd.mean(-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    instrument.count_ops(5 * out.size)
    gs, bs = gain.shape, bias.shape

    def grad_fn(g):
        dxhat = g * gain.data
        dx = inv * (
            dxhat - dxhat.mean(-1, keepdims=True) - xhat * (dxhat * xhat).mean(-1, keepdims=True)
        )
        return dx, _unbroadcast(g * xhat, gs), _unbroadcast(g, bs)

    return _result(out, "layer_norm", (x, gain, bias), grad_fn)


# ---------------------------------------------------------------------------
# shape plumbing
# ---------------------------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _result(a.data.reshape(shape), "reshape", (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), "transpose", (a,), lambda g: (np.transpose(g, inv),))


def swapaxes(a, i: int, j: int) -> Tensor:
    a = as_tensor(a)
    return _result(np.swapaxes(a.data, i, j), "swapaxes", (a,), lambda g: (np.swapaxes(g, i, j),))


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def grad_fn(g):
        full = np.zeros(shape)
        if _is_fancy(idx):
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)

    return _result(a.data[idx], "getitem", (a,), grad_fn)


def _is_fancy(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def grad_fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(out, "concat", tuple(ts), grad_fn)


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    out = np.broadcast_to(a.data, shape)
    return _result(out, "broadcast_to", (a,), lambda g: (_unbroadcast(g, old),))


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` that require grad, inputs before outputs."""
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = topological_order(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._grad_fn is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._grad_fn(g)):
            if pg is None or not p.requires_grad:
                continue
            pg = np.asarray(pg, dtype=np.float64)
            if pg.shape != p.shape:
                pg = _unbroadcast(pg, p.shape) if pg.ndim >= p.ndim else pg.reshape(p.shape)
            prev = grads.get(id(p))
            grads[id(p)] = pg if prev is None else prev + pg


def grad(loss: Tensor, leaves: Iterable[Tensor]) -> list[np.ndarray]:
    """Convenience wrapper: fresh gradients of ``loss`` for ``leaves``."""
    leaves = list(leaves)
    for t in leaves:
        t.grad = None
    backward(loss)
    return [np.zeros_like(t.data) if t.grad is None else t.grad for t in leaves]
