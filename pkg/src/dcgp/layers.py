"""Convolutional sparse variational GP layer.

Each layer has ``M`` inducing patches ``Z`` shared by its ``C`` output
channels; channel ``c`` owns a Gaussian ``q(u_c) = N(m_c, S_c)`` with
``S_c = L_c L_c^T``.  Conditional moments use the standard sparse variational
marginal ``K_ff - A K_zz A^T + A S A^T`` with ``A = K_fz K_zz^{-1}``.

The ``*_graph`` functions build differentiable computations on
:mod:`dcgp.autodiff` tensors; the plain functions are numpy front ends.
"""
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import DimensionMismatch, NegativeVariance, NotPositiveDefinite
from .kernels import RBFHyper, inducing_gram
from .linalg import CholeskyFactor, cholesky, logdet_from_chol, tri_solve
from .patches import PatchConfig, extract_patches, fold_responses, output_shape

NEGATIVE_VARIANCE_TOL = 1e-10


@dataclass
class VariationalGaussian:
    mean: np.ndarray
    scale: np.ndarray  # lower-triangular, S = scale @ scale.T

    @property
    def cov(self):
        return self.scale @ self.scale.T


@dataclass
class SVGPLayerParams:
    Z: np.ndarray  # M x D
    q_mu: np.ndarray  # C x M
    q_sqrt: np.ndarray  # C x M x M, lower-triangular
    hyper: RBFHyper
    cfg: PatchConfig

    @property
    def num_inducing(self):
        return self.Z.shape[0]

    @property
    def channels(self):
        return self.q_mu.shape[0]

    def channel(self, c):
        return VariationalGaussian(self.q_mu[c], self.q_sqrt[c])


# ------------------------------------------------------------ parameterization

def q_sqrt_from_raw(raw):
    """Map an unconstrained ``... x M x M`` tensor to a Cholesky factor.

    The strict lower triangle is taken as is; the diagonal goes through
    softplus so it stays positive.
    """
    return ad.tril(raw, -1) + ad.diag_embed(ad.softplus(ad.diag_part(raw)))


def raw_from_q_sqrt(L):
    """Inverse of :func:`q_sqrt_from_raw` for a factor with positive diagonal."""
    L = np.asarray(L, dtype=np.float64)
    raw = np.tril(L, -1)
    idx = np.arange(L.shape[-1])
    raw[..., idx, idx] = ad.inv_softplus(np.diagonal(L, axis1=-2, axis2=-1))
    return raw


# ----------------------------------------------------------------- graph level

def inducing_chol_graph(Z, log_lengthscale, log_variance, jitter=0.0):
    """Cholesky factor of ``K_zz + jitter * variance * I``."""
    Kzz = ad.rbf_cross(Z, Z, log_lengthscale, log_variance)
    if jitter:
        Kzz = Kzz + ad.exp(log_variance) * (jitter * np.eye(Kzz.shape[0]))
    return ad.cholesky(Kzz)


def svgp_moments_graph(Lz, Kzx, kxx, q_mu, q_sqrt, Kxx=None):
    """Conditional moments for ``C`` outputs sharing one set of inducing inputs.

    ``Kzx`` is ``M x n``.  With ``Kxx`` (``n x n``) the full covariance
    ``C x n x n`` is returned instead of the clamped ``n x C`` variances.
    """
    A = ad.solve_tri(Lz, Kzx)
    B = ad.solve_tri(Lz, A, transpose=True)
    mean = ad.transpose(ad.matmul(q_mu, B))
    LtB = ad.matmul(ad.swapaxes(q_sqrt, -1, -2), B)
    if Kxx is not None:
        base = Kxx - ad.matmul(ad.transpose(A), A)
        return mean, base + ad.matmul(ad.swapaxes(LtB, -1, -2), LtB)
    base = kxx - ad.tsum(ad.square(A), axis=0)
    var = base + ad.tsum(ad.square(LtB), axis=1)
    return mean, ad.clamp_min(ad.transpose(var), 0.0)


def kl_graph(Lz, q_mu, q_sqrt):
    """Sum over outputs of ``KL[N(m_c, S_c) || N(0, K_zz)]``."""
    C, M = q_mu.shape
    stacked = ad.reshape(ad.transpose(q_sqrt, (1, 0, 2)), (M, C * M))
    trace = ad.tsum(ad.square(ad.solve_tri(Lz, stacked)))
    maha = ad.tsum(ad.square(ad.solve_tri(Lz, ad.transpose(q_mu))))
    logdet_k = 2.0 * ad.tsum(ad.log(ad.diag_part(Lz)))
    logdet_s = 2.0 * ad.tsum(ad.log(ad.diag_part(q_sqrt)))
    return 0.5 * (trace + maha - C * M + C * logdet_k - logdet_s)


def layer_graph(h, Z, q_mu, q_sqrt, log_lengthscale, log_variance, cfg, eps, jitter=0.0):
    """One sampled pass ``N x H x W x C_in -> N x H' x W' x C`` through a layer."""
    n, H, W, cin = h.shape
    out = output_shape((H, W, cin), cfg, q_mu.shape[0])
    pat = ad.patches(h, cfg.patch_h, cfg.patch_w, cfg.stride)
    X = ad.reshape(pat, (n * out.height * out.width, pat.shape[2]))
    Lz = inducing_chol_graph(Z, log_lengthscale, log_variance, jitter)
    Kzx = ad.rbf_cross(Z, X, log_lengthscale, log_variance)
    mean, var = svgp_moments_graph(Lz, Kzx, ad.exp(log_variance), q_mu, q_sqrt)
    f = mean + ad.sqrt(var) * eps.reshape(mean.shape)
    return ad.reshape(f, (n, out.height, out.width, out.channels)), Lz


# ------------------------------------------------------------------ numpy API

def _consts(params):
    return (params.Z, params.q_mu, params.q_sqrt,
            np.float64(params.hyper.log_lengthscale), np.float64(params.hyper.log_variance))


def conditional_moments(patches, params, full_cov=False, jitter=0.0):
    """Per-channel conditional mean (``P x C``) and variance (``P x C``).

    With ``full_cov`` the second output is a ``C x P x P`` covariance stack.
    """
    patches = np.atleast_2d(np.asarray(patches, dtype=np.float64))
    if patches.shape[1] != params.Z.shape[1]:
        raise DimensionMismatch(f"patch_dim {patches.shape[1]} != inducing dim {params.Z.shape[1]}")
    Z, q_mu, q_sqrt, ll, lv = _consts(params)
    Lz = inducing_chol_graph(Z, ll, lv, jitter)
    Kzx = ad.rbf_cross(Z, patches, ll, lv)
    Kxx = ad.rbf_cross(patches, patches, ll, lv) if full_cov else None
    mean, var = svgp_moments_graph(Lz, Kzx, np.exp(lv), q_mu, q_sqrt, Kxx=Kxx)
    return mean.value, var.value


def sample_layer(mean, var, eps):
    """Reparameterized draw ``mean + sqrt(var) * eps``."""
    mean, var, eps = (np.asarray(a, dtype=np.float64) for a in (mean, var, eps))
    if np.any(var < -NEGATIVE_VARIANCE_TOL):
        raise NegativeVariance(f"variance down to {var.min():.3g}")
    return mean + np.sqrt(np.maximum(var, 0.0)) * eps


def kl_to_prior(q, Kzz_chol):
    """``KL[N(m, S) || N(0, K_zz)]`` from the prior's Cholesky factor."""
    L = Kzz_chol.L if isinstance(Kzz_chol, CholeskyFactor) else np.asarray(Kzz_chol)
    m = np.asarray(q.mean, dtype=np.float64)
    Ls = np.asarray(q.scale, dtype=np.float64)
    M = m.size
    if L.shape != (M, M) or Ls.shape != (M, M):
        raise DimensionMismatch(f"KL dimensions disagree: m {m.shape}, S {Ls.shape}, K {L.shape}")
    diag_s = np.abs(np.diag(Ls))
    if np.any(diag_s == 0):
        raise NotPositiveDefinite("variational covariance is singular")
    trace = np.sum(tri_solve(L, Ls) ** 2)
    maha = np.sum(tri_solve(L, m[:, None]) ** 2)
    kl = 0.5 * (trace + maha - M + logdet_from_chol(L) - 2.0 * np.sum(np.log(diag_s)))
    return float(kl)


def layer_kl(params, jitter=0.0):
    """Total KL of a layer (all channels)."""
    Z, q_mu, q_sqrt, ll, lv = _consts(params)
    return float(kl_graph(inducing_chol_graph(Z, ll, lv, jitter), q_mu, q_sqrt).value)


def layer_forward(img, params, eps=None, rng=None, jitter=0.0):
    """Sample the layer's output representation for one ``H x W x C`` image.

    Noise comes from ``eps`` (``P x C``) or is drawn from ``rng``.
    """
    img = np.asarray(img, dtype=np.float64)
    out = output_shape(img.shape, params.cfg, params.channels)
    patches = extract_patches(img, params.cfg)
    mean, var = conditional_moments(patches, params, jitter=jitter)
    if eps is None:
        rng = np.random.default_rng() if rng is None else rng
        eps = rng.standard_normal(mean.shape)
    return fold_responses(sample_layer(mean, var, eps), out)


def inducing_factor(params, jitter=0.0):
    """Jittered ``K_zz`` Cholesky factor of a layer, as used by the model."""
    K = inducing_gram(params.Z, params.hyper)
    return cholesky(K + jitter * params.hyper.variance * np.eye(K.shape[0]))
