"""Numba switch.

Every hot loop in :mod:`minsep_accounting.kernels` exists twice: a scalar loop
that numba compiles, and a vectorized numpy twin. ``MINSEP_DISABLE_NUMBA=1``
routes the public kernels through the numpy twins. The flag is read once at
import time; the benchmark script compares both paths in one process.
"""

import os

_FALSY = {"", "0", "false", "no", "off"}

try:
    import numba
    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    NUMBA_AVAILABLE = False

USE_NUMBA = NUMBA_AVAILABLE and (
    os.environ.get("MINSEP_DISABLE_NUMBA", "").strip().lower() in _FALSY
)


def jit(func):
    """Compile ``func`` with numba (nopython, nogil, cached) when available."""
    if not NUMBA_AVAILABLE:
        return func
    return numba.njit(cache=True, nogil=True)(func)


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"
