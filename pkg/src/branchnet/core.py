"""Branched networks: blocks interleaved with branching functions, plus the
reductions that fold branch outputs back into one prediction per sample.

Row layout: a branching with ``R_i`` variants turns ``B`` rows into
``R_i * B`` rows, variant-major. Composing spots therefore puts sample ``b``
of overall branch ``k`` at row ``k * B + b``, so reshaping the output to
``(R, B, C)`` groups each sample's branches along axis 0.
"""

import logging
from enum import Enum
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

from . import ops
from .layers import Head, Module
from .tensor import ShapeError, Tensor, make_result, no_grad
from .transforms import FLIP, IDENTITY, TransformSpec, apply_branching

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


class Reduction(str, Enum):
    VANILLA = "vanilla"
    NONE = "none"
    MAX = "max"
    SUM = "sum"
    GEO = "geo"

    @classmethod
    def parse(cls, value) -> "Reduction":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            raise ValueError(
                f"unknown reduction {value!r}; expected one of {[r.value for r in cls]}"
            ) from None


def inference_reduction(kind) -> Reduction:
    """Map a reduction onto one usable at inference ("none" becomes geo)."""
    kind = Reduction.parse(kind)
    return Reduction.GEO if kind is Reduction.NONE else kind


class BranchedModel(Module):
    """Blocks ``F_0..F_{k-1}`` with optional branchings after each, and a head.

    Spot ``-1`` is the input image, spot ``j`` the output of block ``j``; the
    sentinel spot ``k`` means "no change". Views made with
    :meth:`with_branchings` share every block, so parameters are shared too.
    """

    def __init__(self, blocks: Sequence[Module], head: Head, branchings: Optional[Mapping[int, Sequence]] = None):
        self.blocks = list(blocks)
        self.head = head
        self.branchings: Dict[int, List[TransformSpec]] = {}
        for spot, specs in (branchings or {}).items():
            self._check_spot(spot)
            if not specs:
                raise ValueError(f"empty transform list at spot {spot}")
            self.branchings[int(spot)] = list(specs)

    @property
    def num_blocks(self) -> int:
        return len(self.blocks)

    @property
    def sentinel(self) -> int:
        return len(self.blocks)

    @property
    def num_classes(self) -> int:
        return self.head.num_classes

    def spots(self) -> List[int]:
        return list(range(-1, self.num_blocks))

    def _check_spot(self, spot: int) -> None:
        if not -1 <= spot < len(self.blocks):
            raise ValueError(f"spot {spot} out of range [-1, {len(self.blocks) - 1}]")

    @property
    def total_branches(self) -> int:
        r = 1
        for specs in self.branchings.values():
            r *= len(specs)
        return r

    def with_branchings(self, branchings: Optional[Mapping[int, Sequence]]) -> "BranchedModel":
        view = BranchedModel(self.blocks, self.head, branchings)
        view.training = self.training
        return view

    def forward(self, x: Tensor, rng: Optional[np.random.Generator] = None) -> Tensor:
        return softmax_probs(self.logits(x, rng))

    def logits(self, x: Tensor, rng: Optional[np.random.Generator] = None) -> Tensor:
        if -1 in self.branchings:
            x = apply_branching(x, self.branchings[-1], rng, self.training)
        for i, block in enumerate(self.blocks):
            x = block(x)
            specs = self.branchings.get(i)
            if specs is not None:
                x = apply_branching(x, specs, rng, self.training)
        return self.head(x)

    def flops(self, shape):
        """Multiply-accumulates of a forward pass including branch expansion."""
        total = 0
        rows = shape[0]
        if -1 in self.branchings:
            rows *= len(self.branchings[-1])
        shape = (rows,) + tuple(shape[1:])
        for i, block in enumerate(self.blocks):
            f, shape = block.flops(shape)
            total += f
            if i in self.branchings:
                shape = (shape[0] * len(self.branchings[i]),) + tuple(shape[1:])
        total += self.head.flops(shape)[0]
        return total, (shape[0], 1, 1, self.num_classes)


def softmax_probs(logits: Tensor) -> Tensor:
    return ops.softmax(logits)


def forward(model: BranchedModel, x: Tensor, mode: str = "eval", rng=None) -> Tensor:
    """Per-branch class probabilities, ``R * B`` rows."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    model.train(mode == "train")
    return model.forward(x, rng)


def _grouped(probs: Tensor, num_branches: int):
    if num_branches < 1:
        raise ShapeError("number of branches must be >= 1")
    if probs.rows % num_branches:
        raise ShapeError(f"{probs.rows} rows are not divisible by {num_branches} branches")
    b = probs.rows // num_branches
    return probs.data.astype(np.float64).reshape(num_branches, b, probs.channels)


def reduce(probs: Tensor, num_branches: int, kind) -> Tensor:
    """Fold ``R`` branch distributions per sample into one, then L1-normalise.

    ``max`` and ``sum`` (arithmetic mean) work per class; ``geo`` is the
    per-class geometric mean computed in log space with probabilities floored
    at 1e-12. ``vanilla`` keeps branch 0. Max ties route to the lowest branch.
    """
    kind = Reduction.parse(kind)
    if kind is Reduction.NONE:
        raise ValueError("'none' is a training loss mode, not a reduction; use inference_reduction()")
    p = _grouped(probs, num_branches)
    r, b, c = p.shape
    if kind is Reduction.VANILLA:
        m = p[0]
    elif kind is Reduction.SUM:
        m = p.mean(axis=0)
    elif kind is Reduction.MAX:
        arg = p.argmax(axis=0)
        m = np.take_along_axis(p, arg[None], axis=0)[0]
    else:
        clipped = np.maximum(p, PROB_FLOOR)
        m = np.exp(np.log(clipped).mean(axis=0))
    s = m.sum(axis=1, keepdims=True)
    q = m / s

    def backward(g):
        g = g.reshape(b, c).astype(np.float64)
        dm = (g - (g * q).sum(axis=1, keepdims=True)) / s
        dp = np.zeros_like(p)
        if kind is Reduction.VANILLA:
            dp[0] = dm
        elif kind is Reduction.SUM:
            dp[:] = dm / r
        elif kind is Reduction.MAX:
            np.put_along_axis(dp, arg[None], dm[None], axis=0)
        else:
            dp = np.where(p > PROB_FLOOR, dm * m / (r * clipped), 0.0)
        return (dp.reshape(probs.shape).astype(probs.dtype),)

    return make_result(f"reduce_{kind.value}", (probs,), q.reshape(b, 1, 1, c), backward)


def geo_from_logits(logits: Tensor, num_branches: int) -> Tensor:
    """Geo reduction via the mean-logit identity: softmax of per-class mean logits."""
    z = _grouped(logits, num_branches).mean(axis=0)
    b, c = z.shape
    return ops.softmax(Tensor(z.reshape(b, 1, 1, c)))


def nll(probs: Tensor, targets) -> Tensor:
    """Mean of -log p[target] over rows, with p floored at 1e-12."""
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    n, c = probs.rows, probs.channels
    if t.size != n:
        raise ShapeError(f"nll: {t.size} targets for {n} rows")
    if t.min(initial=0) < 0 or t.max(initial=0) >= c:
        raise ValueError(f"nll: targets must be in [0, {c})")
    p = probs.data.reshape(n, c).astype(np.float64)
    pt = p[np.arange(n), t]
    out = np.asarray(-np.log(np.maximum(pt, PROB_FLOOR)).mean()).reshape(1, 1, 1, 1)

    def backward(g):
        gp = np.zeros((n, c))
        gp[np.arange(n), t] = np.where(pt > PROB_FLOOR, -1.0 / (n * np.maximum(pt, PROB_FLOOR)), 0.0)
        return ((gp * float(g.reshape(()))).reshape(probs.shape).astype(probs.dtype),)

    return make_result("nll", (probs,), out, backward)


def loss(probs: Tensor, targets, kind, num_branches: int = 1) -> Tensor:
    """Cross-entropy for branched outputs.

    ``none`` averages the per-branch loss over all ``R * B`` rows; any other
    kind reduces the branches first and scores the reduced distribution.
    """
    kind = Reduction.parse(kind)
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if kind is Reduction.NONE:
        return nll(probs, np.tile(targets, num_branches))
    return nll(reduce(probs, num_branches, kind), targets)


def infer(model: BranchedModel, x: Tensor, reduction="sum", rng=None, fast_geo: bool = True) -> Tensor:
    """Eval-mode forward followed by the inference reduction (B rows)."""
    kind = inference_reduction(reduction)
    model.eval()
    with no_grad():
        logits = model.logits(x, rng)
        r = model.total_branches
        if kind is Reduction.GEO and fast_geo:
            return geo_from_logits(logits, r)
        return reduce(ops.softmax(logits), r, kind)


def tta_infer(model: BranchedModel, x: Tensor, reduction="sum", rng=None) -> Tensor:
    """Flip test-time augmentation reduced jointly with the in-network branches.

    The original and the horizontally flipped image each run a full pass;
    the ``2 * R`` branch outputs per sample are reduced together.
    """
    kind = inference_reduction(reduction)
    model.eval()
    with no_grad():
        a = model.logits(x, rng)
        b = model.logits(ops.flip_h(x), rng)
        logits = ops.concat_rows([a, b])
        r = 2 * model.total_branches
        if kind is Reduction.GEO:
            return geo_from_logits(logits, r)
        return reduce(ops.softmax(logits), r, kind)


def topk_errors(probs, labels, ks=(1, 5)) -> Dict[int, float]:
    """Top-k error rates in percent."""
    p = probs.data if isinstance(probs, Tensor) else np.asarray(probs)
    p = p.reshape(p.shape[0], -1)
    labels = np.asarray(labels).reshape(-1)
    order = np.argsort(-p, axis=1, kind="stable")
    out = {}
    for k in ks:
        k_eff = min(k, p.shape[1])
        hit = (order[:, :k_eff] == labels[:, None]).any(axis=1)
        out[k] = 100.0 * (1.0 - hit.mean()) if len(labels) else 0.0
    return out


def flip_pair() -> List[TransformSpec]:
    return [IDENTITY, FLIP]
