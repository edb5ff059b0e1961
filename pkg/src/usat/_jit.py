"""Numba switch.

Set ``USAT_NO_JIT=1`` to run every kernel through its pure-numpy path.  When
numba is not importable the numpy path is used regardless.
"""
import os

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None

JIT_ENABLED = numba is not None and os.environ.get("USAT_NO_JIT", "0") not in ("1", "true", "yes")


def njit(*args, **kwargs):
    """``numba.njit`` when numba is installed, otherwise a no-op decorator."""
    if numba is None:  # pragma: no cover
        if args and callable(args[0]):
            return args[0]
        return lambda fn: fn
    return numba.njit(*args, **kwargs)
