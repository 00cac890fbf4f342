"""Optional numba acceleration.

Set ``SAVAD_DISABLE_JIT=1`` to run the pure-numpy kernels instead of the
compiled ones (useful for debugging or on platforms without numba).
"""

import os

try:
    import numba as _numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    _numba = None


def njit(func=None, **kwargs):
    """``numba.njit`` when available, identity decorator otherwise."""
    if _numba is None:
        if func is not None:
            return func
        return lambda f: f
    opts = dict(cache=True, nogil=True)
    opts.update(kwargs)
    if func is not None:
        return _numba.njit(**opts)(func)
    return _numba.njit(**opts)


def use_jit():
    # read on every call so the flag can be flipped at runtime
    flag = os.environ.get("SAVAD_DISABLE_JIT", "0").strip().lower()
    return _numba is not None and flag not in ("1", "true", "yes", "on")
