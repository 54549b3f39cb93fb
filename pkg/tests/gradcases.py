"""Finite-difference gradient cases: every op, layer, transform, branching,
reduction and loss mode, each instantiated from a seed.

A case factory takes an rng and returns ``(fn, tensors)``; ``fn()`` builds the
output from the current contents of ``tensors`` (inputs and parameters), so
the checker can perturb any of them in place.
"""

from contextlib import contextmanager

import numpy as np

from branchnet import ops
from branchnet.core import BranchedModel, loss, reduce
from branchnet.layers import BasicBlock, Conv2d, Head, PreActBlock, Sequential, BatchNorm
from branchnet.tensor import Tensor, no_grad, reset_graph
from branchnet.transforms import FLIP, IDENTITY, TransformSpec, apply_branching, flip_h, rotate, scale

EPS = 1e-3
MAX_COORDS = 16


def _t(arr):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=True)


def _away_from_zero(rng, shape, margin=0.05):
    # keeps ReLU kinks more than eps away from every input
    v = rng.standard_normal(shape)
    return np.sign(v) * (margin + np.abs(v))


def _distinct(rng, shape, gap=0.01):
    # distinct values spaced by `gap`, so max-pool winners are stable under +-eps
    n = int(np.prod(shape))
    return (rng.permutation(n) * gap - n * gap / 2).reshape(shape)


def _f64(module):
    for p in module.parameters():
        p.data = p.data.astype(np.float64)
    return module


def _module_case(module, x):
    module = _f64(module)
    params = module.parameters()
    return (lambda: module(x)), [x] + params


def c_add(rng):
    a, b = _t(rng.standard_normal((2, 3, 3, 4))), _t(rng.standard_normal((1, 1, 1, 4)))
    return (lambda: ops.add(a, b)), [a, b]


def c_mul(rng):
    a, b = _t(rng.standard_normal((2, 3, 3, 4))), _t(rng.standard_normal((2, 1, 1, 4)))
    return (lambda: ops.mul(a, b)), [a, b]


def c_relu(rng):
    x = _t(_away_from_zero(rng, (2, 3, 3, 3)))
    return (lambda: ops.relu(x)), [x]


def c_conv3x3(rng):
    x = _t(rng.standard_normal((2, 5, 5, 2)))
    w = _t(rng.standard_normal((3, 3, 2, 3)) * 0.5)
    b = _t(rng.standard_normal((1, 1, 1, 3)))
    return (lambda: ops.conv2d(x, w, b, 1, 1)), [x, w, b]


def c_conv_stride2(rng):
    x = _t(rng.standard_normal((2, 6, 5, 2)))
    w = _t(rng.standard_normal((3, 3, 2, 2)) * 0.5)
    return (lambda: ops.conv2d(x, w, None, 2, 1)), [x, w]


def c_conv1x1_stride2(rng):
    x = _t(rng.standard_normal((2, 5, 5, 3)))
    w = _t(rng.standard_normal((1, 1, 3, 2)))
    return (lambda: ops.conv2d(x, w, None, 2, 0)), [x, w]


def c_linear(rng):
    x = _t(rng.standard_normal((3, 1, 1, 5)))
    w = _t(rng.standard_normal((1, 1, 5, 4)))
    b = _t(rng.standard_normal((1, 1, 1, 4)))
    return (lambda: ops.linear(x, w, b)), [x, w, b]


def c_batchnorm_train(rng):
    x = _t(rng.standard_normal((3, 3, 3, 2)) * 2 + 1)
    g = _t(rng.uniform(0.5, 1.5, (1, 1, 1, 2)))
    b = _t(rng.standard_normal((1, 1, 1, 2)))
    rm, rv = np.zeros(2), np.ones(2)
    return (lambda: ops.batchnorm(x, g, b, rm, rv, True)), [x, g, b]


def c_batchnorm_eval(rng):
    x = _t(rng.standard_normal((3, 3, 3, 2)))
    g = _t(rng.uniform(0.5, 1.5, (1, 1, 1, 2)))
    b = _t(rng.standard_normal((1, 1, 1, 2)))
    rm, rv = rng.standard_normal(2), rng.uniform(0.5, 2.0, 2)
    return (lambda: ops.batchnorm(x, g, b, rm, rv, False)), [x, g, b]


def c_maxpool(rng):
    x = _t(_distinct(rng, (2, 5, 5, 2)))
    return (lambda: ops.maxpool(x, 3, 2, 1)), [x]


def c_avgpool(rng):
    x = _t(rng.standard_normal((2, 4, 4, 2)))
    return (lambda: ops.avgpool(x, 2, 2, 0)), [x]


def c_global_avgpool(rng):
    x = _t(rng.standard_normal((2, 3, 5, 3)))
    return (lambda: ops.global_avgpool(x)), [x]


def c_softmax(rng):
    x = _t(rng.standard_normal((3, 1, 1, 5)) * 2)
    return (lambda: ops.softmax(x)), [x]


def c_concat_take(rng):
    a, b = _t(rng.standard_normal((2, 2, 2, 2))), _t(rng.standard_normal((3, 2, 2, 2)))
    return (lambda: ops.take_rows(ops.concat_rows([a, b]), 1, 4)), [a, b]


def c_preact_block(rng):
    x = _t(rng.standard_normal((3, 4, 4, 2)))
    block = PreActBlock(2, 3, stride=2, rng=rng)
    for bn in (block.bn1, block.bn2):
        bn.gamma.data = rng.uniform(0.5, 1.5, bn.gamma.shape)
        bn.beta.data = rng.standard_normal(bn.beta.shape) * 0.3
    return _module_case(block, x)


def c_basic_block(rng):
    x = _t(rng.standard_normal((3, 4, 4, 2)))
    block = BasicBlock(2, 2, stride=1, rng=rng)
    block.bn2.beta.data = rng.standard_normal(block.bn2.beta.shape)
    return _module_case(block, x)


def c_stem(rng):
    x = _t(rng.standard_normal((3, 4, 4, 3)))
    stem = Sequential(Conv2d(3, 2, 3, 1, rng=rng), BatchNorm(2))
    return _module_case(stem, x)


def c_head(rng):
    x = _t(rng.standard_normal((3, 3, 3, 4)))
    head = Head(4, 5, preact=True, rng=rng)
    head.bn.beta.data = rng.standard_normal(head.bn.beta.shape) * 0.5
    return _module_case(head, x)


def c_flip(rng):
    x = _t(rng.standard_normal((2, 3, 4, 2)))
    return (lambda: flip_h(x)), [x]


def c_rotate(rng):
    x = _t(rng.standard_normal((2, 6, 6, 2)))
    angle = float(rng.uniform(-30, 30))
    return (lambda: rotate(x, angle)), [x]


def c_scale(rng):
    x = _t(rng.standard_normal((2, 6, 6, 2)))
    factor = float(rng.choice([0.8, 0.9, 1.1, 1.25]))
    return (lambda: scale(x, factor)), [x]


def c_branching(rng):
    x = _t(rng.standard_normal((2, 5, 5, 2)))
    specs = [IDENTITY, FLIP, TransformSpec("rotate", random_range=(-20.0, 20.0)), TransformSpec("scale", factor=0.9)]
    seed = int(rng.integers(1 << 30))
    # same draws on every evaluation
    return (lambda: apply_branching(x, specs, np.random.default_rng(seed), training=True)), [x]


def c_branched_model(rng):
    x = _t(rng.standard_normal((2, 4, 4, 2)))
    blocks = [Sequential(Conv2d(2, 3, 3, 1, rng=rng)), PreActBlock(3, 3, 1, rng=rng), PreActBlock(3, 4, 2, rng=rng)]
    head = Head(4, 3, preact=True, rng=rng)
    model = BranchedModel(blocks, head, {0: [IDENTITY, FLIP], 1: [IDENTITY, FLIP]})
    _f64(model)
    model.train()
    params = model.parameters()
    picked = [params[i] for i in sorted(rng.choice(len(params), size=3, replace=False))]
    return (lambda: model.forward(x)), [x] + picked


def _probs(rng, r, b, c):
    # logits with a clear per-class winner across branches, so max is differentiable
    z = rng.standard_normal((r * b, 1, 1, c))
    return _t(z)


def _reduce_case(kind):
    def case(rng):
        r, b, c = 3, 2, 4
        while True:
            z = _probs(rng, r, b, c)
            with no_grad():
                p = ops.softmax(z).data.reshape(r, b, c)
            srt = np.sort(p, axis=0)
            if kind != "max" or (srt[-1] - srt[-2]).min() > 1e-2:
                break
        return (lambda: reduce(ops.softmax(z), r, kind)), [z]

    case.__name__ = f"c_reduce_{kind}"
    return case


def _loss_case(kind):
    def case(rng):
        r, b, c = 2, 3, 4
        while True:
            z = _probs(rng, r, b, c)
            with no_grad():
                p = ops.softmax(z).data.reshape(r, b, c)
            srt = np.sort(p, axis=0)
            if kind != "max" or (srt[-1] - srt[-2]).min() > 1e-2:
                break
        y = rng.integers(0, c, size=b)
        return (lambda: loss(ops.softmax(z), y, kind, r)), [z]

    case.__name__ = f"c_loss_{kind}"
    return case


CASES = {
    "add": c_add,
    "mul": c_mul,
    "relu": c_relu,
    "conv3x3": c_conv3x3,
    "conv_stride2": c_conv_stride2,
    "conv1x1_stride2": c_conv1x1_stride2,
    "linear": c_linear,
    "batchnorm_train": c_batchnorm_train,
    "batchnorm_eval": c_batchnorm_eval,
    "maxpool": c_maxpool,
    "avgpool": c_avgpool,
    "global_avgpool": c_global_avgpool,
    "softmax": c_softmax,
    "concat_take_rows": c_concat_take,
    "preact_block": c_preact_block,
    "basic_block": c_basic_block,
    "stem": c_stem,
    "head": c_head,
    "flip": c_flip,
    "rotate": c_rotate,
    "scale": c_scale,
    "branching": c_branching,
    "branched_model": c_branched_model,
}
for _kind in ("vanilla", "max", "sum", "geo"):
    CASES[f"reduce_{_kind}"] = _reduce_case(_kind)
for _kind in ("none", "vanilla", "max", "sum", "geo"):
    CASES[f"loss_{_kind}"] = _loss_case(_kind)


class KinkCrossed(Exception):
    pass


@contextmanager
def relu_patterns(log):
    """Record the on/off pattern of every ReLU evaluated inside the block."""
    orig = ops.relu

    def tracked(x):
        log.append(x.data > 0)
        return orig(x)

    ops.relu = tracked
    try:
        yield
    finally:
        ops.relu = orig


def _relative_error_once(case, rng, eps):
    fn, tensors = case(rng)
    reset_graph()
    base_patterns = []
    with relu_patterns(base_patterns):
        out = fn()
    proj = rng.standard_normal(out.shape)
    for t in tensors:
        t.grad = None
    scalar = ops.sum_all(ops.mul(out, Tensor(proj)))
    scalar.backward()

    def objective():
        seen = []
        with no_grad(), relu_patterns(seen):
            value = float((fn().data.astype(np.float64) * proj).sum())
        if any(not np.array_equal(a, b) for a, b in zip(seen, base_patterns)):
            raise KinkCrossed
        return value

    worst = 0.0
    for t in tensors:
        flat = t.data.reshape(-1)
        coords = rng.choice(flat.size, size=min(MAX_COORDS, flat.size), replace=False)
        analytic = (t.grad if t.grad is not None else np.zeros_like(t.data)).reshape(-1)[coords]
        numeric = np.empty(len(coords))
        for k, i in enumerate(coords):
            orig = flat[i]
            try:
                flat[i] = orig + eps
                fp = objective()
                flat[i] = orig - eps
                fm = objective()
            finally:
                flat[i] = orig
            numeric[k] = (fp - fm) / (2 * eps)
        scale_ = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-6)
        worst = max(worst, float(np.abs(analytic - numeric).max() / scale_))
    return worst


def max_relative_error(case, seed: int, eps: float = EPS, max_draws: int = 50):
    """Worst relative error between backprop and central differences over all tensors.

    A draw where a +-eps step flips any ReLU on or off sits on a kink, where
    central differences are not a gradient; such draws are replaced by a
    fresh one from the same seed stream. Returns (error, redraws).
    """
    rng = np.random.default_rng(seed)
    for redraws in range(max_draws):
        try:
            return _relative_error_once(case, rng, eps), redraws
        except KinkCrossed:
            continue
    raise RuntimeError(f"no kink-free draw in {max_draws} attempts (seed {seed})")
