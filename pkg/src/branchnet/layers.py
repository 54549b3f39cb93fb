"""Building blocks and the two architecture families used in the experiments.

A network is a flat list of blocks ``F_0 .. F_{k-1}`` (block 0 is the stem)
plus a :class:`Head`. Branching spots sit between blocks, so the block list
is what the spot numbering refers to.
"""

import math
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from . import ops
from .tensor import Tensor


class Module:
    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Module):
                yield from value.named_buffers(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{full}.{i}.")
        yield from self._own_buffers(prefix)

    def _own_buffers(self, prefix: str):
        return iter(())

    def children(self) -> Iterator["Module"]:
        for value in vars(self).values():
            if isinstance(value, Module):
                yield value
            elif isinstance(value, (list, tuple)):
                yield from (v for v in value if isinstance(v, Module))

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def flops(self, shape) -> Tuple[int, tuple]:
        """Multiply-accumulates for one forward pass and the output shape."""
        return 0, shape

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)


def _param(arr, name=None) -> Tensor:
    return Tensor(np.asarray(arr, dtype=np.float32), requires_grad=True, name=name)


def _out_hw(h, w, k, stride, pad):
    return (h + 2 * pad - k) // stride + 1, (w + 2 * pad - k) // stride + 1


class Conv2d(Module):
    kind = "conv2d"

    def __init__(self, cin, cout, k=3, stride=1, pad=None, bias=False, rng=None):
        rng = rng or np.random.default_rng(0)
        self.cin, self.cout, self.k, self.stride = cin, cout, k, stride
        self.pad = k // 2 if pad is None else pad
        # Kaiming normal, fan-out mode
        std = math.sqrt(2.0 / (k * k * cout))
        self.weight = _param(rng.normal(0.0, std, size=(k, k, cin, cout)))
        self.bias = _param(np.zeros((1, 1, 1, cout))) if bias else None

    def forward(self, x):
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.pad)

    def flops(self, shape):
        n, h, w, _ = shape
        ho, wo = _out_hw(h, w, self.k, self.stride, self.pad)
        return n * ho * wo * self.k * self.k * self.cin * self.cout, (n, ho, wo, self.cout)


class BatchNorm(Module):
    kind = "batchnorm"

    def __init__(self, c, momentum=0.1, eps=1e-5):
        self.c, self.momentum, self.eps = c, momentum, eps
        self.gamma = _param(np.ones((1, 1, 1, c)))
        self.beta = _param(np.zeros((1, 1, 1, c)))
        # float32 so a checkpoint round trip is exact
        self.running_mean = np.zeros(c, dtype=np.float32)
        self.running_var = np.ones(c, dtype=np.float32)

    def forward(self, x):
        return ops.batchnorm(
            x, self.gamma, self.beta, self.running_mean, self.running_var, self.training, self.momentum, self.eps
        )

    def _own_buffers(self, prefix):
        yield f"{prefix}running_mean", self.running_mean
        yield f"{prefix}running_var", self.running_var


class ReLU(Module):
    kind = "relu"

    def forward(self, x):
        return ops.relu(x)


class MaxPool(Module):
    kind = "maxpool"

    def __init__(self, k=3, stride=2, pad=1):
        self.k, self.stride, self.pad = k, stride, pad

    def forward(self, x):
        return ops.maxpool(x, self.k, self.stride, self.pad)

    def flops(self, shape):
        n, h, w, c = shape
        ho, wo = _out_hw(h, w, self.k, self.stride, self.pad)
        return 0, (n, ho, wo, c)


class AvgPool(MaxPool):
    kind = "avgpool"

    def forward(self, x):
        return ops.avgpool(x, self.k, self.stride, self.pad)


class GlobalAvgPool(Module):
    kind = "global_avgpool"

    def forward(self, x):
        return ops.global_avgpool(x)

    def flops(self, shape):
        return 0, (shape[0], 1, 1, shape[3])


class Linear(Module):
    kind = "linear"

    def __init__(self, cin, cout, rng=None):
        rng = rng or np.random.default_rng(0)
        self.cin, self.cout = cin, cout
        bound = 1.0 / math.sqrt(cin)
        self.weight = _param(rng.uniform(-bound, bound, size=(1, 1, cin, cout)))
        self.bias = _param(rng.uniform(-bound, bound, size=(1, 1, 1, cout)))

    def forward(self, x):
        return ops.linear(x, self.weight, self.bias)

    def flops(self, shape):
        return shape[0] * self.cin * self.cout, (shape[0], 1, 1, self.cout)


class Sequential(Module):
    kind = "sequential"

    def __init__(self, *layers):
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x

    def flops(self, shape):
        total = 0
        for layer in self.layers:
            f, shape = layer.flops(shape)
            total += f
        return total, shape


class Stem(Sequential):
    kind = "stem"


class PreActBlock(Module):
    """BN-ReLU-conv3x3-BN-ReLU-conv3x3 with an identity or 1x1 projection shortcut."""

    kind = "residual_preact"

    def __init__(self, cin, cout, stride=1, rng=None):
        self.stride = stride
        self.bn1 = BatchNorm(cin)
        self.conv1 = Conv2d(cin, cout, 3, stride, rng=rng)
        self.bn2 = BatchNorm(cout)
        self.conv2 = Conv2d(cout, cout, 3, 1, rng=rng)
        self.shortcut = Conv2d(cin, cout, 1, stride, pad=0, rng=rng) if (stride != 1 or cin != cout) else None

    @property
    def downsamples(self) -> bool:
        return self.stride != 1

    def forward(self, x):
        a = ops.relu(self.bn1(x))
        skip = self.shortcut(a) if self.shortcut is not None else x
        y = self.conv1(a)
        y = self.conv2(ops.relu(self.bn2(y)))
        return ops.add(y, skip)

    def flops(self, shape):
        f1, s1 = self.conv1.flops(shape)
        f2, s2 = self.conv2.flops(s1)
        f3 = self.shortcut.flops(shape)[0] if self.shortcut is not None else 0
        return f1 + f2 + f3, s2


class BasicBlock(Module):
    """Post-activation ResNet block: conv-BN-ReLU-conv-BN (+ shortcut) -> ReLU."""

    kind = "residual_basic"

    def __init__(self, cin, cout, stride=1, rng=None):
        self.stride = stride
        self.conv1 = Conv2d(cin, cout, 3, stride, rng=rng)
        self.bn1 = BatchNorm(cout)
        self.conv2 = Conv2d(cout, cout, 3, 1, rng=rng)
        self.bn2 = BatchNorm(cout)
        if stride != 1 or cin != cout:
            self.proj = Conv2d(cin, cout, 1, stride, pad=0, rng=rng)
            self.proj_bn = BatchNorm(cout)
        else:
            self.proj = None
            self.proj_bn = None

    @property
    def downsamples(self) -> bool:
        return self.stride != 1

    def forward(self, x):
        y = ops.relu(self.bn1(self.conv1(x)))
        y = self.bn2(self.conv2(y))
        skip = self.proj_bn(self.proj(x)) if self.proj is not None else x
        return ops.relu(ops.add(y, skip))

    def flops(self, shape):
        f1, s1 = self.conv1.flops(shape)
        f2, s2 = self.conv2.flops(s1)
        f3 = self.proj.flops(shape)[0] if self.proj is not None else 0
        return f1 + f2 + f3, s2


class Head(Module):
    """Optional final BN-ReLU, then global average pooling and a linear layer.

    Returns logits; the softmax is applied by the branched model.
    """

    kind = "head"

    def __init__(self, cin, num_classes, preact=False, rng=None):
        self.num_classes = num_classes
        self.bn = BatchNorm(cin) if preact else None
        self.pool = GlobalAvgPool()
        self.fc = Linear(cin, num_classes, rng=rng)

    def forward(self, x):
        if self.bn is not None:
            x = ops.relu(self.bn(x))
        return self.fc(self.pool(x))

    def flops(self, shape):
        return self.fc.flops((shape[0], 1, 1, shape[3]))


def build_preact_resnet(depth_n: int, num_classes: int, widths: Sequence[int] = (16, 32, 64), seed: int = 0):
    """PreAct ResNet with ``6 * depth_n + 2`` weighted layers for 32x32 inputs.

    Returns ``(blocks, head)``: a 3x3 stem conv followed by ``3 * depth_n``
    pre-activation blocks; stages 2 and 3 open with a stride-2 block.
    """
    if depth_n < 1:
        raise ValueError("depth_n must be >= 1")
    rng = np.random.default_rng(seed)
    blocks: List[Module] = [Stem(Conv2d(3, widths[0], 3, 1, rng=rng))]
    cin = widths[0]
    for stage, width in enumerate(widths):
        for i in range(depth_n):
            stride = 2 if (stage > 0 and i == 0) else 1
            blocks.append(PreActBlock(cin, width, stride, rng=rng))
            cin = width
    head = Head(cin, num_classes, preact=True, rng=rng)
    return blocks, head


def build_resnet18(num_classes: int, width: int = 64, small_input: bool = False, seed: int = 0):
    """ResNet-18: stem, max-pool, then 4 stages of 2 basic blocks.

    Channels are ``width * (1, 2, 4, 8)``. ``small_input`` swaps the 7x7/2
    stem for a 3x3/1 conv, which suits 32-64 px desk-scale images.
    """
    rng = np.random.default_rng(seed)
    if small_input:
        stem_conv = Conv2d(3, width, 3, 1, rng=rng)
    else:
        stem_conv = Conv2d(3, width, 7, 2, pad=3, rng=rng)
    blocks: List[Module] = [Stem(stem_conv, BatchNorm(width), ReLU()), MaxPool(3, 2, 1)]
    cin = width
    for stage in range(4):
        cout = width * 2**stage
        for i in range(2):
            stride = 2 if (stage > 0 and i == 0) else 1
            blocks.append(BasicBlock(cin, cout, stride, rng=rng))
            cin = cout
    head = Head(cin, num_classes, preact=False, rng=rng)
    return blocks, head


def count_weighted_layers(blocks: Sequence[Module], head: Head) -> int:
    """Convolutions and linear layers on the main path (projections excluded)."""

    def _walk(m):
        if isinstance(m, (PreActBlock, BasicBlock)):
            return 2
        if isinstance(m, (Conv2d, Linear)):
            return 1
        return sum(_walk(c) for c in m.children())

    return sum(_walk(b) for b in blocks) + _walk(head)
