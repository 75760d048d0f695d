"""Backend switch for the compiled kernels.

Set ``STOCHKAM_DISABLE_JIT=1`` to run the pure-numpy kernels instead of the
numba ones (also used automatically when numba is not importable).
``STOCHKAM_THREADS`` sets the numba thread count.
"""

import os

_DISABLED = os.environ.get("STOCHKAM_DISABLE_JIT", "0").lower() in ("1", "true", "yes")

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False

JIT_ENABLED = HAVE_NUMBA and not _DISABLED

if HAVE_NUMBA:
    from numba import njit, prange

    if "NUMBA_THREADING_LAYER" not in os.environ:
        numba.config.THREADING_LAYER = "workqueue"

    _threads = os.environ.get("STOCHKAM_THREADS")
    if _threads:
        numba.set_num_threads(int(_threads))
else:  # pragma: no cover

    def njit(func=None, **kwargs):
        if func is not None:
            return func

        def wrapper(f):
            return f

        return wrapper

    def prange(*args):
        return range(*args)


def default_backend():
    return "numba" if JIT_ENABLED else "numpy"


def resolve_backend(backend):
    if backend is None:
        return default_backend()
    if backend not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {backend!r}")
    if backend == "numba" and not HAVE_NUMBA:
        raise ValueError("numba backend requested but numba is not installed")
    return backend
