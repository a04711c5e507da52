"""RBF base kernel over patch vectors and the weighted convolutional kernel.

The RBF convention is ``variance * exp(-|a - b|^2 / (2 * lengthscale^2))``
with both hyperparameters stored in log space.
"""
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import DimensionMismatch


@dataclass(frozen=True)
class RBFHyper:
    log_lengthscale: float = 0.0
    log_variance: float = 0.0

    @property
    def lengthscale(self):
        return float(np.exp(self.log_lengthscale))

    @property
    def variance(self):
        return float(np.exp(self.log_variance))


def _rows(A):
    A = np.asarray(A, dtype=np.float64)
    return A[None] if A.ndim == 1 else A


def rbf(a, b, h):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise DimensionMismatch(f"patch vectors differ in length: {a.size} vs {b.size}")
    d = float(np.sum((a - b) ** 2))
    return h.variance * float(np.exp(-0.5 * d / h.lengthscale**2))


def kernel_matrix(A, B, h):
    A, B = _rows(A), _rows(B)
    if A.shape[1] != B.shape[1]:
        raise DimensionMismatch(f"patch_dim {A.shape[1]} != {B.shape[1]}")
    K, _ = _kernels.rbf_cross(A, B, h.lengthscale, h.variance)
    return K


def inducing_gram(Z, h):
    K = kernel_matrix(Z, Z, h)
    return 0.5 * (K + K.T)


def _check_weighted(f, w):
    f = _rows(f)
    w = np.asarray(w, dtype=np.float64).ravel()
    if f.shape[0] != w.size:
        raise DimensionMismatch(f"{f.shape[0]} patches but {w.size} weights")
    return f, w


def weighted_conv_kernel(f, f2, w, h):
    """Image kernel ``w^T K(f, f2) w`` summed over all patch pairs."""
    f, w = _check_weighted(f, w)
    f2, _ = _check_weighted(f2, w)
    return float(w @ kernel_matrix(f, f2, h) @ w)


def weighted_self_kernel(F, w, h):
    """``w^T K(F_n, F_n) w`` for each image in an ``N x P x D`` batch."""
    F = np.asarray(F, dtype=np.float64)
    if F.ndim == 2:
        F = F[None]
    w = np.asarray(w, dtype=np.float64).ravel()
    if F.shape[1] != w.size:
        raise DimensionMismatch(f"{F.shape[1]} patches but {w.size} weights")
    return _kernels.weighted_self_kernel(F, w, h.lengthscale, h.variance)


def interdomain_cross(f, Z, w, h):
    """Cross-covariance ``sum_p w_p k(f[p], z_m)`` between an image and each inducing patch."""
    f, w = _check_weighted(f, w)
    return w @ kernel_matrix(f, Z, h)
