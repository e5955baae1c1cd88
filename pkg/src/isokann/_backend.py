"""Kernel backend selection.

Hot loops (path integration, in-kernel network evaluation, counter-based
noise) are written twice: a numba ``@njit`` version and a vectorized numpy
version. ``ISOKANN_BACKEND=numpy`` forces the numpy path; by default numba is
used when it imports cleanly. The choice is read once at import time.
"""

from __future__ import annotations

import os

_requested = os.environ.get("ISOKANN_BACKEND", "numba").strip().lower()
if _requested not in ("numba", "numpy"):
    raise ImportError(f"ISOKANN_BACKEND must be 'numba' or 'numpy', got {_requested!r}")

try:
    import numba

    NUMBA_AVAILABLE = True
    if "NUMBA_THREADING_LAYER" not in os.environ:
        # the bundled TBB is too old and warns on every probe
        numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    NUMBA_AVAILABLE = False

USE_NUMBA = NUMBA_AVAILABLE and _requested == "numba"
BACKEND = "numba" if USE_NUMBA else "numpy"


def njit(*args, **kwargs):
    """``numba.njit`` when numba is importable, else an identity decorator.

    Functions decorated here are always compiled if numba exists (so both
    paths can be benchmarked in one process); whether the compiled kernels
    are *dispatched to* is decided by ``USE_NUMBA``.
    """
    if NUMBA_AVAILABLE:
        return numba.njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]
    return lambda f: f


prange = numba.prange if NUMBA_AVAILABLE else range


def set_threads(n: int | None) -> None:
    """Set the numba worker count. Results never depend on it."""
    if not NUMBA_AVAILABLE or n is None:
        return
    n = max(1, min(int(n), numba.config.NUMBA_NUM_THREADS))
    numba.set_num_threads(n)


def get_threads() -> int:
    if not NUMBA_AVAILABLE:
        return 1
    return numba.get_num_threads()
