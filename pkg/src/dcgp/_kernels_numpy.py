"""Pure-numpy implementations of the hot kernels."""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def sqdist(A, B):
    d = np.sum(A * A, axis=1)[:, None] + np.sum(B * B, axis=1)[None, :] - 2.0 * (A @ B.T)
    np.maximum(d, 0.0, out=d)
    return d


def rbf_cross(A, B, lengthscale, variance):
    d = sqdist(A, B)
    K = variance * np.exp(d * (-0.5 / lengthscale**2))
    return K, d


def rbf_cross_grad(G, K, d, A, B, lengthscale):
    inv_l2 = 1.0 / lengthscale**2
    W = G * K
    gA = -inv_l2 * (np.sum(W, axis=1)[:, None] * A - W @ B)
    gB = -inv_l2 * (np.sum(W, axis=0)[:, None] * B - W.T @ A)
    g_logl = inv_l2 * float(np.sum(W * d))
    g_logvar = float(np.sum(W))
    return gA, gB, g_logl, g_logvar


def _batched_gram(F, lengthscale, variance):
    sq = np.sum(F * F, axis=2)
    d = sq[:, :, None] + sq[:, None, :] - 2.0 * np.matmul(F, F.transpose(0, 2, 1))
    np.maximum(d, 0.0, out=d)
    return variance * np.exp(d * (-0.5 / lengthscale**2)), d


def weighted_self_kernel(F, w, lengthscale, variance):
    K, _ = _batched_gram(F, lengthscale, variance)
    return np.einsum("npq,q,p->n", K, w, w, optimize=True)


def weighted_self_kernel_grad(G, F, w, lengthscale, variance):
    K, d = _batched_gram(F, lengthscale, variance)
    inv_l2 = 1.0 / lengthscale**2
    Kw = K @ w
    gw = 2.0 * (G @ Kw)
    W = K * (G[:, None, None] * np.outer(w, w)[None])
    gF = -2.0 * inv_l2 * (np.sum(W, axis=2)[:, :, None] * F - np.matmul(W, F))
    g_logl = inv_l2 * float(np.sum(W * d))
    g_logvar = float(np.sum(W))
    return gF, gw, g_logl, g_logvar


def gather_patches(x, ph, pw, stride):
    n, h, w, c = x.shape
    oh = (h - ph) // stride + 1
    ow = (w - pw) // stride + 1
    win = sliding_window_view(x, (ph, pw), axis=(1, 2))[:, ::stride, ::stride][:, :oh, :ow]
    # (n, oh, ow, c, ph, pw) -> (n, oh, ow, ph, pw, c)
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n, oh * ow, ph * pw * c)


def scatter_patches(g, shape, ph, pw, stride):
    n, h, w, c = shape
    oh = (h - ph) // stride + 1
    ow = (w - pw) // stride + 1
    g6 = g.reshape(n, oh, ow, ph, pw, c)
    out = np.zeros(shape)
    for i in range(ph):
        for j in range(pw):
            out[:, i:i + stride * (oh - 1) + 1:stride, j:j + stride * (ow - 1) + 1:stride, :] += g6[:, :, :, i, j, :]
    return out
