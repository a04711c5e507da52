"""Dispatch for the hot kernels: numba when enabled, numpy otherwise."""
from . import _kernels_numpy
from ._accel import USE_NUMBA

if USE_NUMBA:
    from . import _kernels_numba as _impl
else:
    _impl = _kernels_numpy

BACKEND = "numba" if USE_NUMBA else "numpy"

sqdist = _impl.sqdist
rbf_cross = _impl.rbf_cross
rbf_cross_grad = _impl.rbf_cross_grad
weighted_self_kernel = _impl.weighted_self_kernel
weighted_self_kernel_grad = _impl.weighted_self_kernel_grad
gather_patches = _impl.gather_patches
scatter_patches = _impl.scatter_patches
