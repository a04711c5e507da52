"""Backend selection for the hot kernels.

Set ``DCGP_NUMBA=0`` in the environment to force the pure-numpy path.
The flag is read once at import time.
"""
import os

USE_NUMBA = os.environ.get("DCGP_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")

try:
    import numba  # noqa: F401
except ImportError:  # pragma: no cover
    USE_NUMBA = False
