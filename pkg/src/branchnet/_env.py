"""Process-wide switches read from the environment.

``BRANCHNET_DETERMINISTIC=1``  pin BLAS/numba to one thread (bit-exact reruns).
``BRANCHNET_KERNELS``          ``numba`` (default when importable) or ``numpy``.
``BRANCHNET_DEBUG=1``          scan every op output for NaN/Inf and fail fast.
"""

import os

_THREAD_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMBA_NUM_THREADS",
)


def _flag(name: str) -> bool:
    return os.environ.get(name, "").strip().lower() in ("1", "true", "yes", "on")


def deterministic() -> bool:
    return _flag("BRANCHNET_DETERMINISTIC")


def debug() -> bool:
    return _flag("BRANCHNET_DEBUG")


def requested_kernels() -> str:
    return os.environ.get("BRANCHNET_KERNELS", "numba").strip().lower() or "numba"


def pin_threads_early() -> None:
    # must run before numpy loads its BLAS
    if deterministic():
        for var in _THREAD_VARS:
            os.environ[var] = "1"


def set_threads(n: int) -> None:
    """Limit BLAS thread pools at runtime (the numba kernels are serial)."""
    from threadpoolctl import threadpool_limits

    threadpool_limits(limits=n)
