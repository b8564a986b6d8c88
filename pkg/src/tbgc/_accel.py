"""Numba switch.

Set ``TBGC_DISABLE_NUMBA=1`` to force the pure-numpy kernels (also used
automatically when numba cannot be imported).
"""

from __future__ import annotations

import functools
import os

_FLAG = os.environ.get("TBGC_DISABLE_NUMBA", "").strip().lower()

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

NUMBA_ENABLED = numba is not None and _FLAG not in ("1", "true", "yes", "on")


def njit(fn):
    """``numba.njit(cache=True)`` when numba is usable, else a no-op."""
    if numba is None:
        return fn
    return functools.wraps(fn)(numba.njit(cache=True)(fn))
