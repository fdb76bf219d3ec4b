"""Backend switch for the hot numeric kernels.

Every kernel that matters for runtime ships twice: a numba ``@njit`` loop and a
vectorised numpy version.  ``WEAKSEG_NUMBA=0`` selects the numpy versions
(useful when numba is missing or when debugging); the default is numba when it
imports.  ``WEAKSEG_THREADS`` caps the number of worker threads/processes.
"""

from __future__ import annotations

import os

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

_OFF = {"0", "false", "no", "off", "numpy"}

NUMBA_ENABLED = numba is not None and os.environ.get("WEAKSEG_NUMBA", "1").strip().lower() not in _OFF


def njit(*args, **kwargs):
    """``numba.njit`` with on-disk caching, or a no-op decorator without numba."""
    kwargs.setdefault("cache", True)
    if numba is None:
        if args and callable(args[0]):
            return args[0]
        return lambda fn: fn
    return numba.njit(*args, **kwargs)


def backend() -> str:
    return "numba" if NUMBA_ENABLED else "numpy"


def thread_limit() -> int:
    raw = os.environ.get("WEAKSEG_THREADS")
    if raw is None:
        return os.cpu_count() or 1
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


if numba is not None and "WEAKSEG_THREADS" in os.environ:
    numba.set_num_threads(min(thread_limit(), numba.config.NUMBA_NUM_THREADS))
