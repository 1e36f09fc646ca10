"""Optional numba acceleration.

The hot loops in :mod:`ereem_lab.kernels` have two implementations: a numba
``@njit`` version and a vectorised numpy version.  Which one runs is decided
once at import time:

* ``EREEM_LAB_NUMBA=0`` (or ``false``/``no``/``off``) forces numpy;
* otherwise numba is used when it can be imported.

``EREEM_LAB_THREADS`` sets the numba thread count (and the default number of
worker processes used by the bootstrap).
"""
from __future__ import annotations

import os

_FALSE = {"0", "false", "no", "off", ""}


def _env_flag(name: str, default: bool) -> bool:
    raw = os.environ.get(name)
    if raw is None:
        return default
    return raw.strip().lower() not in _FALSE


try:  # pragma: no cover - depends on the environment
    import numba
    from numba import prange

    HAS_NUMBA = True
    if "NUMBA_THREADING_LAYER" not in os.environ:
        # avoids probing an outdated TBB; workqueue is always available
        numba.config.THREADING_LAYER = "workqueue"
except ImportError:  # pragma: no cover
    numba = None
    prange = range
    HAS_NUMBA = False

USE_NUMBA = HAS_NUMBA and _env_flag("EREEM_LAB_NUMBA", True)


def njit(*args, **kwargs):
    """``numba.njit`` when numba is importable, identity decorator otherwise.

    The compiled functions are always built when numba exists so the benchmark
    can compare both paths regardless of ``EREEM_LAB_NUMBA``.
    """
    if numba is None:
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda f: f
    kwargs.setdefault("cache", True)
    return numba.njit(*args, **kwargs)


def default_threads() -> int:
    raw = os.environ.get("EREEM_LAB_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            pass
    return 1


def set_threads(n: int | None) -> int:
    """Set the numba thread pool size; returns the effective count."""
    n = default_threads() if n is None else max(1, int(n))
    if numba is not None:
        n = min(n, numba.config.NUMBA_NUM_THREADS)
        numba.set_num_threads(n)
    return n


def backend_name() -> str:
    return "numba" if USE_NUMBA else "numpy"
