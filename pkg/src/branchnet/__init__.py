"""Branched convolutional networks with in-network augmentation, on numpy."""

from . import _env

__version__ = "0.1.0"

# before numpy is imported anywhere, so BLAS honours single-threaded mode
_env.pin_threads_early()

from .core import BranchedModel, Reduction, forward, infer, loss, reduce, tta_infer  # noqa: E402
from .tensor import Tensor, backward, no_grad  # noqa: E402
from .transforms import FLIP, IDENTITY, TransformSpec  # noqa: E402

__all__ = [
    "BranchedModel",
    "FLIP",
    "IDENTITY",
    "Reduction",
    "Tensor",
    "TransformSpec",
    "backward",
    "forward",
    "infer",
    "loss",
    "no_grad",
    "reduce",
    "tta_infer",
]
