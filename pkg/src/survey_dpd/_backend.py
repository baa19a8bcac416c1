"""Kernel backend selection.

``SURVEY_DPD_BACKEND`` picks the implementation of the hot per-cluster
kernels: ``numba`` (default when numba imports) or ``numpy``.
"""
import functools
import logging
import os

logger = logging.getLogger(__name__)

ENV_VAR = "SURVEY_DPD_BACKEND"
_VALID = ("numba", "numpy")

try:
    import numba as _nb

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    _nb = None
    HAS_NUMBA = False


def requested_backend():
    name = os.environ.get(ENV_VAR, "numba").strip().lower()
    if name not in _VALID:
        raise ValueError(f"{ENV_VAR}={name!r}; expected one of {_VALID}")
    if name == "numba" and not HAS_NUMBA:
        logger.warning("numba not importable, falling back to the numpy kernels")
        return "numpy"
    return name


if HAS_NUMBA:
    njit = functools.partial(_nb.njit, cache=True, nogil=True)
else:  # pragma: no cover
    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda f: f
