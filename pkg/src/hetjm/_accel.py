"""Optional numba acceleration.

Set ``HETJM_DISABLE_NUMBA=1`` to run the pure-numpy kernels instead of the
compiled loops. The flag is read once at import time.
"""

import os

_DISABLED = os.environ.get("HETJM_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes"}

try:
    if _DISABLED:
        raise ImportError
    from numba import njit as _numba_njit

    HAS_NUMBA = True
except ImportError:
    HAS_NUMBA = False


def njit(*args, **kwargs):
    """``numba.njit`` when available and enabled, identity otherwise."""
    if HAS_NUMBA:
        return _numba_njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]

    def wrap(fn):
        return fn

    return wrap


BACKEND = "numba" if HAS_NUMBA else "numpy"


def worker_count(requested=None):
    """Worker cap from ``HETJM_THREADS`` (0 or unset means one per CPU)."""
    if requested is None:
        try:
            requested = int(os.environ.get("HETJM_THREADS", "0"))
        except ValueError:
            requested = 0
    if requested <= 0:
        requested = os.cpu_count() or 1
    return max(1, requested)
