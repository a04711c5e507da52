"""Cholesky with jitter escalation, triangular solves and log-determinants."""
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .errors import DimensionMismatch, NotPositiveDefinite

DEFAULT_BASE_JITTER = 1e-6
MAX_ESCALATIONS = 6


@dataclass(frozen=True)
class CholeskyFactor:
    """Lower-triangular ``L`` with ``L @ L.T == A + jitter * I``."""

    L: np.ndarray
    jitter: float = 0.0

    @property
    def size(self):
        return self.L.shape[0]


def jitter_ladder(A, base_jitter=DEFAULT_BASE_JITTER):
    """Candidate jitters: 0, then ``base * mean(diag) * 10**k`` for k = 0..6."""
    scale = float(np.mean(np.diag(A))) if A.size else 1.0
    if not np.isfinite(scale) or scale <= 0:
        scale = 1.0
    base = base_jitter * scale
    ladder = [0.0]
    if base > 0:
        ladder += [base * 10.0**k for k in range(MAX_ESCALATIONS + 1)]
    return ladder


def cholesky(A, base_jitter=DEFAULT_BASE_JITTER):
    """Factor a symmetric matrix, adding the smallest diagonal jitter that works.

    Raises NotPositiveDefinite when every jitter on the ladder fails.
    """
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DimensionMismatch(f"cholesky needs a square matrix, got {A.shape}")
    if base_jitter < 0:
        raise ValueError("base_jitter must be non-negative")
    if not np.all(np.isfinite(A)):
        raise NotPositiveDefinite("matrix has non-finite entries")
    eye = np.eye(A.shape[0])
    for j in jitter_ladder(A, base_jitter):
        try:
            L = np.linalg.cholesky(A + j * eye if j else A)
        except np.linalg.LinAlgError:
            continue
        if np.all(np.diag(L) > 0):
            return CholeskyFactor(L, j)
    raise NotPositiveDefinite(f"cholesky failed for all jitters up to base*1e{MAX_ESCALATIONS}")


def tri_solve(L, B, transpose=False):
    """Solve ``L X = B`` (or ``L.T X = B`` when ``transpose``)."""
    Lm = L.L if isinstance(L, CholeskyFactor) else np.asarray(L, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if Lm.ndim != 2 or Lm.shape[0] != Lm.shape[1] or B.shape[0] != Lm.shape[0]:
        raise DimensionMismatch(f"cannot solve {Lm.shape} against {B.shape}")
    return solve_triangular(Lm, B, lower=True, trans=1 if transpose else 0, check_finite=False)


def logdet_from_chol(L):
    Lm = L.L if isinstance(L, CholeskyFactor) else np.asarray(L)
    return 2.0 * float(np.sum(np.log(np.diag(Lm))))
