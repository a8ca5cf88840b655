"""Numba dispatch.

Hot kernels are written twice: an explicit-loop version compiled with
``numba.njit`` and a vectorized numpy version. Set ``PEERASSIGN_NO_NUMBA=1``
to force the numpy path (also used automatically when numba is missing).
"""

import os

_FLAG = "PEERASSIGN_NO_NUMBA"

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    numba = None
    HAVE_NUMBA = False


def numba_enabled():
    if not HAVE_NUMBA:
        return False
    return os.environ.get(_FLAG, "").strip().lower() not in ("1", "true", "yes", "on")


def njit(fn):
    """Compile ``fn`` with numba when available; otherwise return it unchanged."""
    if not HAVE_NUMBA:
        return fn
    return numba.njit(cache=True, nogil=True)(fn)
