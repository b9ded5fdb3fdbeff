"""Backend selection for the hot loops.

Kernels are compiled with numba when it is importable and the environment
variable ``FASTENET_PURE_NUMPY`` is unset (or ``0``).  Otherwise the
vectorised numpy variants in :mod:`fastenet.kernels` are used and the loop
kernels run as plain Python.
"""

import os

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is optional
    numba = None
    HAVE_NUMBA = False


def _env_pure_numpy():
    return os.environ.get("FASTENET_PURE_NUMPY", "0").strip().lower() not in ("", "0", "false", "no")


USE_NUMBA = HAVE_NUMBA and not _env_pure_numpy()


def njit(*args, **kwargs):
    """``numba.njit`` when the numba backend is active, identity otherwise."""
    if USE_NUMBA:
        return numba.njit(*args, cache=True, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]
    return lambda fn: fn


def backend_name():
    return "numba" if USE_NUMBA else "numpy"


_strict = True


def set_strict_deterministic(flag=True):
    """Pin BLAS to one thread so reductions are never reassociated."""
    global _strict
    _strict = bool(flag)
    _apply_thread_limits()


def is_strict():
    return _strict


_limiter = None


def _apply_thread_limits():
    global _limiter
    from threadpoolctl import threadpool_limits

    if _limiter is not None:
        _limiter.restore_original_limits()
        _limiter = None
    if _strict:
        # The numba kernels are serial; only BLAS needs pinning.
        _limiter = threadpool_limits(limits=1)
