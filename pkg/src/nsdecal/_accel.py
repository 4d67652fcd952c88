"""Backend switch for the hot loops in :mod:`nsdecal.kernels`.

Numba is used when importable unless ``NSDECAL_DISABLE_NUMBA`` is set to a
truthy value (``1``, ``true``, ``yes``) before the package is imported.
"""

import os

_flag = os.environ.get("NSDECAL_DISABLE_NUMBA", "").strip().lower()

try:
    import numba  # noqa: F401
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and _flag not in ("1", "true", "yes", "on")


def njit(*args, **kwargs):
    """``numba.njit`` when available, identity decorator otherwise."""
    if HAVE_NUMBA:
        from numba import njit as _njit
        return _njit(*args, **kwargs)

    def wrap(fn):
        return fn

    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]
    return wrap
