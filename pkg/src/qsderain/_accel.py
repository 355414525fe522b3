"""Numba switch.

Hot kernels are compiled with ``numba.njit`` unless ``QSDERAIN_NO_NUMBA`` is set
to a truthy value (or numba is missing), in which case the pure-numpy
implementations in :mod:`qsderain.kernels` are used instead.
"""
import os

_FALSY = {"", "0", "false", "no", "off"}


def _env_disabled() -> bool:
    return os.environ.get("QSDERAIN_NO_NUMBA", "").strip().lower() not in _FALSY


try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and not _env_disabled()


def njit(*args, **kw):
    """``numba.njit`` when numba is available, otherwise a passthrough decorator.

    Compilation is lazy, so decorating does not cost anything when the numpy
    path is selected.
    """
    if HAVE_NUMBA:
        return numba.njit(*args, cache=True, **kw)
    if len(args) == 1 and callable(args[0]) and not kw:
        return args[0]
    return lambda f: f
