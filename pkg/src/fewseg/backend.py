"""Kernel backend selection.

The convolution kernels exist in two implementations: a numba @njit version
and a pure-numpy fallback.  Selection happens once at import time via the
FEWSEG_BACKEND environment variable ("numba" or "numpy").  Default is numba
when importable, numpy otherwise.
"""

import os

_VALID = ("numba", "numpy")


def _detect() -> str:
    requested = os.environ.get("FEWSEG_BACKEND", "").strip().lower()
    if requested:
        if requested not in _VALID:
            raise ValueError(
                f"FEWSEG_BACKEND must be one of {_VALID}, got {requested!r}"
            )
        if requested == "numba":
            import numba  # noqa: F401  -- fail loudly if explicitly requested
        return requested
    try:
        import numba  # noqa: F401
        return "numba"
    except ImportError:
        return "numpy"


BACKEND = _detect()
