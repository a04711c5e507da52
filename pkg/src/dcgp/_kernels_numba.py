"""Numba-compiled versions of the hot kernels (same signatures as the numpy path)."""
import math

import numpy as np
from numba import njit


@njit(cache=True)
def _sq_norms(A):
    n, D = A.shape
    out = np.empty(n)
    for i in range(n):
        s = 0.0
        for k in range(D):
            s += A[i, k] * A[i, k]
        out[i] = s
    return out


@njit(cache=True)
def _sqdist(A, B):
    # cross term through BLAS; norms, clamp and exp fused in compiled loops
    d = -2.0 * np.dot(A, B.T)
    a = _sq_norms(A)
    b = _sq_norms(B)
    n, m = d.shape
    for i in range(n):
        for j in range(m):
            v = d[i, j] + a[i] + b[j]
            d[i, j] = v if v > 0.0 else 0.0
    return d


def sqdist(A, B):
    return _sqdist(np.ascontiguousarray(A, dtype=np.float64), np.ascontiguousarray(B, dtype=np.float64))


@njit(cache=True)
def _rbf_cross(A, B, lengthscale, variance):
    d = _sqdist(A, B)
    K = np.empty_like(d)
    c = -0.5 / (lengthscale * lengthscale)
    n, m = d.shape
    for i in range(n):
        for j in range(m):
            K[i, j] = variance * math.exp(c * d[i, j])
    return K, d


def rbf_cross(A, B, lengthscale, variance):
    return _rbf_cross(np.ascontiguousarray(A, dtype=np.float64), np.ascontiguousarray(B, dtype=np.float64),
                      float(lengthscale), float(variance))


@njit(cache=True)
def _rbf_cross_grad(G, K, d, A, B, lengthscale):
    n, D = A.shape
    m = B.shape[0]
    inv_l2 = 1.0 / (lengthscale * lengthscale)
    W = np.empty((n, m))
    row = np.zeros(n)
    col = np.zeros(m)
    g_logl = 0.0
    g_logvar = 0.0
    for i in range(n):
        for j in range(m):
            wij = G[i, j] * K[i, j]
            W[i, j] = wij
            row[i] += wij
            col[j] += wij
            g_logvar += wij
            g_logl += wij * d[i, j]
    gA = np.dot(W, B)
    gB = np.dot(W.T, A)
    for i in range(n):
        for k in range(D):
            gA[i, k] = -inv_l2 * (row[i] * A[i, k] - gA[i, k])
    for j in range(m):
        for k in range(D):
            gB[j, k] = -inv_l2 * (col[j] * B[j, k] - gB[j, k])
    return gA, gB, g_logl * inv_l2, g_logvar


def rbf_cross_grad(G, K, d, A, B, lengthscale):
    return _rbf_cross_grad(np.ascontiguousarray(G, dtype=np.float64), np.ascontiguousarray(K),
                           np.ascontiguousarray(d), np.ascontiguousarray(A, dtype=np.float64),
                           np.ascontiguousarray(B, dtype=np.float64), float(lengthscale))


@njit(cache=True)
def _weighted_self_kernel(F, w, lengthscale, variance):
    N, P, D = F.shape
    c = -0.5 / (lengthscale * lengthscale)
    out = np.empty(N)
    for n in range(N):
        d = _sqdist(F[n], F[n])
        acc = 0.0
        for p in range(P):
            acc += w[p] * w[p]
            for q in range(p + 1, P):
                acc += 2.0 * w[p] * w[q] * math.exp(c * d[p, q])
        out[n] = variance * acc
    return out


def weighted_self_kernel(F, w, lengthscale, variance):
    return _weighted_self_kernel(np.ascontiguousarray(F, dtype=np.float64), np.ascontiguousarray(w, dtype=np.float64),
                                 float(lengthscale), float(variance))


@njit(cache=True)
def _weighted_self_kernel_grad(G, F, w, lengthscale, variance):
    N, P, D = F.shape
    inv_l2 = 1.0 / (lengthscale * lengthscale)
    c = -0.5 * inv_l2
    gF = np.empty((N, P, D))
    gw = np.zeros(P)
    W = np.empty((P, P))
    row = np.empty(P)
    g_logl = 0.0
    g_logvar = 0.0
    for n in range(N):
        g = G[n]
        d = _sqdist(F[n], F[n])
        row[:] = 0.0
        for p in range(P):
            # diagonal: k(x, x) = variance, no lengthscale dependence
            gw[p] += 2.0 * g * variance * w[p]
            g_logvar += g * variance * w[p] * w[p]
            W[p, p] = 0.0
            for q in range(p + 1, P):
                kpq = variance * math.exp(c * d[p, q])
                gw[p] += 2.0 * g * kpq * w[q]
                gw[q] += 2.0 * g * kpq * w[p]
                wpq = g * w[p] * w[q] * kpq
                W[p, q] = wpq
                W[q, p] = wpq
                row[p] += wpq
                row[q] += wpq
                g_logvar += 2.0 * wpq
                g_logl += 2.0 * wpq * d[p, q]
        WF = np.dot(W, F[n])
        for p in range(P):
            for k in range(D):
                gF[n, p, k] = -2.0 * inv_l2 * (row[p] * F[n, p, k] - WF[p, k])
    return gF, gw, g_logl * inv_l2, g_logvar


def weighted_self_kernel_grad(G, F, w, lengthscale, variance):
    return _weighted_self_kernel_grad(np.ascontiguousarray(G, dtype=np.float64),
                                      np.ascontiguousarray(F, dtype=np.float64),
                                      np.ascontiguousarray(w, dtype=np.float64), float(lengthscale), float(variance))


@njit(cache=True)
def _gather_patches(x, ph, pw, stride):
    n, h, w, c = x.shape
    oh = (h - ph) // stride + 1
    ow = (w - pw) // stride + 1
    out = np.empty((n, oh * ow, ph * pw * c))
    for b in range(n):
        for r in range(oh):
            for s in range(ow):
                p = r * ow + s
                k = 0
                for i in range(ph):
                    for j in range(pw):
                        for ch in range(c):
                            out[b, p, k] = x[b, r * stride + i, s * stride + j, ch]
                            k += 1
    return out


def gather_patches(x, ph, pw, stride):
    return _gather_patches(np.ascontiguousarray(x), ph, pw, stride)


@njit(cache=True)
def _scatter_patches(g, n, h, w, c, ph, pw, stride):
    oh = (h - ph) // stride + 1
    ow = (w - pw) // stride + 1
    out = np.zeros((n, h, w, c))
    for b in range(n):
        for r in range(oh):
            for s in range(ow):
                p = r * ow + s
                k = 0
                for i in range(ph):
                    for j in range(pw):
                        for ch in range(c):
                            out[b, r * stride + i, s * stride + j, ch] += g[b, p, k]
                            k += 1
    return out


def scatter_patches(g, shape, ph, pw, stride):
    n, h, w, c = shape
    return _scatter_patches(np.ascontiguousarray(g), n, h, w, c, ph, pw, stride)
