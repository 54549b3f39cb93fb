"""Hot-loop kernels with a numba path and a pure-numpy fallback.

The backend is picked once at import from ``BRANCHNET_KERNELS`` and can be
switched at runtime with :func:`use` (benchmarks and cross-checks do this).
"""

import logging
from contextlib import contextmanager

from .. import _env
from . import _numpy

log = logging.getLogger(__name__)

try:
    from . import _numba

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is optional at runtime
    _numba = None
    HAS_NUMBA = False

_BACKENDS = {"numpy": _numpy}
if HAS_NUMBA:
    _BACKENDS["numba"] = _numba

_active = None


def use(name: str) -> None:
    global _active
    if name not in ("numpy", "numba"):
        raise ValueError(f"unknown kernel backend {name!r}; expected 'numba' or 'numpy'")
    if name == "numba" and not HAS_NUMBA:
        log.warning("numba not importable, falling back to numpy kernels")
        name = "numpy"
    _active = name


def backend() -> str:
    return _active


@contextmanager
def using(name: str):
    prev = _active
    use(name)
    try:
        yield
    finally:
        use(prev)


use(_env.requested_kernels())


def im2col(xp, kh, kw, stride):
    return _BACKENDS[_active].im2col(xp, kh, kw, stride)


def col2im(cols, xp_shape, kh, kw, stride):
    return _BACKENDS[_active].col2im(cols, xp_shape, kh, kw, stride)


def maxpool_forward(xp, k, stride):
    return _BACKENDS[_active].maxpool_forward(xp, k, stride)


def maxpool_backward(grad, arg, xp_shape, k, stride):
    return _BACKENDS[_active].maxpool_backward(grad, arg, xp_shape, k, stride)


def warp_forward(x, table):
    return _BACKENDS[_active].warp_forward(x, table)


def warp_backward(grad, table):
    return _BACKENDS[_active].warp_backward(grad, table)
