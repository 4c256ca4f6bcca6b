"""Numba switch.

Set ``GRAPHROUTE_DISABLE_NUMBA=1`` to force the pure-numpy kernels (also the
fallback when numba is not importable).
"""
from __future__ import annotations

import os

_disabled = os.environ.get("GRAPHROUTE_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes"}

try:
    if _disabled:
        raise ImportError("numba disabled by GRAPHROUTE_DISABLE_NUMBA")
    from numba import njit as _njit

    HAS_NUMBA = True
except ImportError:
    _njit = None
    HAS_NUMBA = False


def njit(fn):
    """``numba.njit(cache=True)`` when available, otherwise the plain function."""
    if HAS_NUMBA:
        return _njit(cache=True)(fn)
    return fn
