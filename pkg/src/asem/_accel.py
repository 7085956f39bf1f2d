"""Optional numba acceleration.

Set ``ASEM_NUMBA=0`` to force the pure-numpy code paths.  When numba is not
installed the numpy paths are used automatically.
"""

from __future__ import annotations

import os

_FLAG = os.environ.get("ASEM_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    numba = None
    HAVE_NUMBA = False

USE_NUMBA = _FLAG and HAVE_NUMBA


def njit(func):
    """``numba.njit(cache=True)`` when available, otherwise the plain function."""
    if HAVE_NUMBA:
        return numba.njit(cache=True)(func)
    return func
