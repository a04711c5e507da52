"""Reverse-mode differentiation over numpy arrays.

Every operation returns a :class:`Tensor` that remembers its parents together
with a vector-Jacobian product closure.  :func:`backward` walks the recorded
graph once in reverse topological order.  Each graph belongs to the call that
built it, so independent evaluations never share state.

Matrix primitives (Cholesky, triangular solve) carry hand-derived adjoints;
the RBF kernel and patch extraction delegate to the hot kernels in
``_kernels``.
"""
import math

import numpy as np
from scipy.linalg import solve_triangular

from . import _kernels
from .errors import NonFiniteGradient, NotPositiveDefinite
from .linalg import DEFAULT_BASE_JITTER, jitter_ladder


class Tensor:
    __slots__ = ("value", "parents")
    __array_priority__ = 1000

    def __init__(self, value, parents=()):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def T(self):
        return transpose(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(other))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _value(x):
    return x.value if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g.reshape(shape)


def _make(value, *links):
    """Build a node; ``links`` are (input, vjp) pairs, constants are skipped."""
    return Tensor(value, tuple((x, f) for x, f in links if isinstance(x, Tensor)))


# ----------------------------------------------------------------- elementwise

def add(a, b):
    av, bv = _value(a), _value(b)
    out = av + bv
    return _make(out, (a, lambda g: _unbroadcast(g, av.shape)), (b, lambda g: _unbroadcast(g, bv.shape)))


def neg(a):
    return _make(-_value(a), (a, lambda g: -g))


def mul(a, b):
    av, bv = _value(a), _value(b)
    return _make(av * bv,
                 (a, lambda g: _unbroadcast(g * bv, av.shape)),
                 (b, lambda g: _unbroadcast(g * av, bv.shape)))


def div(a, b):
    av, bv = _value(a), _value(b)
    out = av / bv
    return _make(out,
                 (a, lambda g: _unbroadcast(g / bv, av.shape)),
                 (b, lambda g: _unbroadcast(-g * out / bv, bv.shape)))


def exp(a):
    out = np.exp(_value(a))
    return _make(out, (a, lambda g: g * out))


def log(a):
    av = _value(a)
    return _make(np.log(av), (a, lambda g: g / av))


def square(a):
    av = _value(a)
    return _make(av * av, (a, lambda g: 2.0 * g * av))


def sqrt(a):
    """Square root whose derivative is taken as zero at non-positive inputs."""
    av = _value(a)
    out = np.sqrt(np.maximum(av, 0.0))

    def vjp(g):
        safe = np.where(out > 0, out, 1.0)
        return np.where(out > 0, 0.5 * g / safe, 0.0)

    return _make(out, (a, vjp))


def clamp_min(a, lo=0.0):
    av = _value(a)
    mask = av > lo
    return _make(np.where(mask, av, lo), (a, lambda g: g * mask))


def softplus(a):
    av = _value(a)
    out = np.logaddexp(0.0, av)
    sig = 0.5 * (1.0 + np.tanh(0.5 * av))
    return _make(out, (a, lambda g: g * sig))


def inv_softplus(y):
    """Numpy inverse of :func:`softplus` (for initialization only)."""
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


# ------------------------------------------------------------------ structural

def tsum(a, axis=None, keepdims=False):
    av = _value(a)
    out = np.sum(av, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, av.shape).copy()

    return _make(out, (a, vjp))


def mean(a, axis=None):
    av = _value(a)
    n = av.size if axis is None else np.prod([av.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis) * (1.0 / n)


def reshape(a, shape):
    av = _value(a)
    return _make(av.reshape(shape), (a, lambda g: g.reshape(av.shape)))


def transpose(a, axes=None):
    av = _value(a)
    if axes is None:
        axes = tuple(range(av.ndim))[::-1]
    inv = np.argsort(axes)
    return _make(np.transpose(av, axes), (a, lambda g: np.transpose(g, inv)))


def swapaxes(a, i, j):
    av = _value(a)
    return _make(np.swapaxes(av, i, j), (a, lambda g: np.swapaxes(g, i, j)))


def _is_basic_index(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in items)


def getitem(a, idx):
    av = _value(a)
    basic = _is_basic_index(idx)

    def vjp(g):
        out = np.zeros_like(av)
        if basic:
            out[idx] += g
        else:
            np.add.at(out, idx, g)
        return out

    return _make(av[idx], (a, vjp))


def stack(items, axis=0):
    vals = [_value(x) for x in items]
    links = [(x, (lambda g, i=i: np.take(g, i, axis=axis))) for i, x in enumerate(items)]
    return _make(np.stack(vals, axis=axis), *links)


def concatenate(items, axis=0):
    vals = [_value(x) for x in items]
    bounds = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def piece(i):
        return lambda g: np.split(g, bounds, axis=axis)[i]

    return _make(np.concatenate(vals, axis=axis), *[(x, piece(i)) for i, x in enumerate(items)])


def tril(a, k=0):
    av = _value(a)
    mask = np.tril(np.ones(av.shape[-2:], dtype=bool), k)
    return _make(np.where(mask, av, 0.0), (a, lambda g: np.where(mask, g, 0.0)))


def diag_part(a):
    """Diagonal of the trailing two axes."""
    av = _value(a)
    n = av.shape[-1]

    def vjp(g):
        out = np.zeros_like(av)
        idx = np.arange(n)
        out[..., idx, idx] = g
        return out

    return _make(np.diagonal(av, axis1=-2, axis2=-1).copy(), (a, vjp))


def diag_embed(a):
    av = _value(a)
    n = av.shape[-1]
    idx = np.arange(n)
    out = np.zeros(av.shape + (n,))
    out[..., idx, idx] = av
    return _make(out, (a, lambda g: np.diagonal(g, axis1=-2, axis2=-1).copy()))


# --------------------------------------------------------------- linear algebra

def matmul(a, b):
    """Batched matrix product; both operands must have ``ndim >= 2``."""
    av, bv = _value(a), _value(b)
    if av.ndim < 2 or bv.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")
    return _make(av @ bv,
                 (a, lambda g: _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape)),
                 (b, lambda g: _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape)))


def _phi(X):
    X = np.tril(X)
    X[np.diag_indices_from(X)] *= 0.5
    return X


def cholesky(a, base_jitter=DEFAULT_BASE_JITTER):
    """Lower Cholesky factor with jitter escalation.

    The jitter is a constant of the forward pass; the adjoint is the
    symmetric matrix gradient.
    """
    av = _value(a)
    eye = np.eye(av.shape[0])
    L = None
    for j in jitter_ladder(av, base_jitter):
        try:
            L = np.linalg.cholesky(av + j * eye if j else av)
            break
        except np.linalg.LinAlgError:
            continue
    if L is None:
        raise NotPositiveDefinite("cholesky failed for every jitter on the ladder")

    def vjp(g):
        P = _phi(L.T @ np.tril(g))
        S = solve_triangular(L, solve_triangular(L, P.T, lower=True, trans=1).T, lower=True, trans=1)
        return 0.5 * (S + S.T)

    return _make(L, (a, vjp))


def solve_tri(L, B, transpose=False):
    """``L^{-1} B`` (or ``L^{-T} B``) for lower-triangular 2-D ``L`` and 2-D ``B``."""
    Lv, Bv = _value(L), _value(B)
    trans = 1 if transpose else 0
    X = solve_triangular(Lv, Bv, lower=True, trans=trans, check_finite=False)

    def vjp_B(g):
        return solve_triangular(Lv, g, lower=True, trans=1 - trans, check_finite=False)

    def vjp_L(g):
        Bbar = vjp_B(g)
        return -np.tril(X @ Bbar.T if transpose else Bbar @ X.T)

    return _make(X, (L, vjp_L), (B, vjp_B))


def logsumexp(a, axis=-1):
    av = _value(a)
    mx = np.max(av, axis=axis, keepdims=True)
    out = np.log(np.sum(np.exp(av - mx), axis=axis, keepdims=True)) + mx
    soft = np.exp(av - out)
    return _make(np.squeeze(out, axis), (a, lambda g: np.expand_dims(g, axis) * soft))


def log_softmax(a, axis=-1):
    av = _value(a)
    mx = np.max(av, axis=axis, keepdims=True)
    out = av - mx - np.log(np.sum(np.exp(av - mx), axis=axis, keepdims=True))
    soft = np.exp(out)
    return _make(out, (a, lambda g: g - soft * np.sum(g, axis=axis, keepdims=True)))


# ------------------------------------------------------------ kernel primitives

def rbf_cross(A, B, log_lengthscale, log_variance):
    """RBF cross-covariance between the rows of ``A`` and ``B``.

    Passing the same tensor for ``A`` and ``B`` is fine: both adjoints
    accumulate into it.
    """
    Av, Bv = _value(A), _value(B)
    ell = math.exp(float(_value(log_lengthscale)))
    var = math.exp(float(_value(log_variance)))
    K, d = _kernels.rbf_cross(Av, Bv, ell, var)
    cache = {}

    def grads(g):
        key = id(g)
        if key not in cache:
            cache.clear()
            cache[key] = _kernels.rbf_cross_grad(g, K, d, Av, Bv, ell)
        return cache[key]

    return _make(K,
                 (A, lambda g: grads(g)[0]),
                 (B, lambda g: grads(g)[1]),
                 (log_lengthscale, lambda g: np.asarray(grads(g)[2])),
                 (log_variance, lambda g: np.asarray(grads(g)[3])))


def weighted_self_kernel(F, w, log_lengthscale, log_variance):
    """Per-image ``w^T K(F_n, F_n) w`` for ``F`` of shape ``N x P x D``."""
    Fv, wv = _value(F), _value(w)
    ell = math.exp(float(_value(log_lengthscale)))
    var = math.exp(float(_value(log_variance)))
    out = _kernels.weighted_self_kernel(Fv, wv, ell, var)
    cache = {}

    def grads(g):
        key = id(g)
        if key not in cache:
            cache.clear()
            cache[key] = _kernels.weighted_self_kernel_grad(g, Fv, wv, ell, var)
        return cache[key]

    return _make(out,
                 (F, lambda g: grads(g)[0]),
                 (w, lambda g: grads(g)[1]),
                 (log_lengthscale, lambda g: np.asarray(grads(g)[2])),
                 (log_variance, lambda g: np.asarray(grads(g)[3])))


def patches(x, ph, pw, stride):
    """Differentiable patch gather: ``N x H x W x C`` -> ``N x P x D``."""
    xv = _value(x)
    out = _kernels.gather_patches(xv, ph, pw, stride)
    return _make(out, (x, lambda g: _kernels.scatter_patches(g, xv.shape, ph, pw, stride)))


# ------------------------------------------------------------------- gradients

def backward(out, grad=None):
    """Return ``{id(node): adjoint}`` for every node that ``out`` depends on."""
    order = []
    seen = set()
    stack_ = [(out, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for parent, _ in node.parents:
            if id(parent) not in seen:
                stack_.append((parent, False))
    grads = {id(out): np.ones_like(out.value) if grad is None else np.asarray(grad, dtype=np.float64)}
    for node in reversed(order):
        g = grads.pop(id(node), None) if node.parents else grads.get(id(node))
        if g is None:
            continue
        for parent, vjp in node.parents:
            contrib = vjp(g)
            pid = id(parent)
            if pid in grads:
                grads[pid] = grads[pid] + contrib
            else:
                grads[pid] = np.asarray(contrib, dtype=np.float64)
    return grads


def gradient(objective, params, seed=None):
    """Value and exact gradients of a scalar objective of named arrays.

    ``objective(tensors, seed)`` receives a dict of leaf :class:`Tensor` and
    must return a scalar :class:`Tensor`.  Gradients are returned in a dict
    with the same names and shapes as ``params``.
    """
    leaves = {name: Tensor(np.array(v, dtype=np.float64, copy=True)) for name, v in params.items()}
    out = objective(leaves, seed)
    if out.value.size != 1:
        raise ValueError("objective must be scalar")
    adj = backward(out)
    grads = {}
    for name, leaf in leaves.items():
        g = adj.get(id(leaf))
        g = np.zeros_like(leaf.value) if g is None else g.reshape(leaf.value.shape)
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(name)
        grads[name] = g
    return float(out.value), grads


def fd_check(objective, params, h=1e-5, tolerance=1e-4, seed=None, grads=None):
    """Compare reverse-mode gradients with central differences.

    Both sides of each difference use the same ``seed``.  Returns
    ``{name: (max_rel_error, passed)}``.  ``grads`` may be supplied to check
    an externally computed gradient.
    """
    if grads is None:
        _, grads = gradient(objective, params, seed)

    def f(p):
        return float(objective({k: Tensor(v) for k, v in p.items()}, seed).value)

    report = {}
    for name, value in params.items():
        value = np.asarray(value, dtype=np.float64)
        g = np.asarray(grads[name]).reshape(value.shape)
        worst = 0.0
        for idx in np.ndindex(value.shape):
            plus = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
            minus = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
            plus[name][idx] += h
            minus[name][idx] -= h
            fd = (f(plus) - f(minus)) / (2 * h)
            err = abs(fd - g[idx]) / max(abs(fd), abs(g[idx]), 1e-6)
            worst = max(worst, err)
        report[name] = (worst, worst <= tolerance)
    return report
