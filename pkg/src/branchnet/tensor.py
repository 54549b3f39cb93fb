"""Rank-4 tensors and a tape-based reverse-mode autodiff.

Every value is laid out rows x height x width x channels. Parameters use the
same container (a conv kernel is kh x kw x cin x cout, a bias 1 x 1 x 1 x c).
Operations record themselves on the thread's active :class:`Graph`; the tape
is append-only, so its order is already topological.
"""

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from . import _env


class ShapeError(ValueError):
    """Raised when an op receives inputs whose dimensions do not fit."""


class NonFiniteError(FloatingPointError):
    """Raised when a NaN/Inf shows up where it is not allowed."""


class GraphConsumedError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_node")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data)
        if arr.ndim != 4:
            raise ShapeError(f"Tensor needs 4 dims (rows, height, width, channels), got shape {arr.shape}")
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def channels(self) -> int:
        return self.data.shape[3]

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, name=self.name)

    def backward(self, grad=None) -> None:
        """Seed this tensor (default: ones) and run the active graph backwards."""
        seed = np.ones_like(self.data) if grad is None else np.asarray(grad, dtype=self.data.dtype)
        graph = current_graph()
        if not self.is_leaf and not any(n is self._node for n in graph.nodes):
            raise GraphConsumedError("this output's graph was already run backwards or reset")
        try:
            backward(graph, [seed], outputs=[self])
        finally:
            reset_graph()

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # arithmetic sugar; the implementations live in ops
    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops

        return ops.mul(self, -1.0)

    def __sub__(self, other):
        from . import ops

        return ops.add(self, ops.mul(other, -1.0) if isinstance(other, Tensor) else -other)


@dataclass
class Node:
    op: str
    inputs: tuple
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class Graph:
    """Append-only tape of the operations of one forward pass."""

    nodes: List[Node] = field(default_factory=list)
    outputs: List[Tensor] = field(default_factory=list)
    consumed: bool = False

    def record(self, node: Node) -> None:
        if self.consumed:
            raise GraphConsumedError("cannot record on a graph that was already run backwards")
        self.nodes.append(node)

    def __len__(self):
        return len(self.nodes)

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().pop()
        return False


_local = threading.local()


def _stack() -> list:
    if not hasattr(_local, "graphs"):
        _local.graphs = [Graph()]
        _local.grad_enabled = True
    return _local.graphs


def current_graph() -> Graph:
    return _stack()[-1]


def reset_graph() -> Graph:
    """Replace the active graph with an empty one (drops saved activations)."""
    stack = _stack()
    stack[-1] = Graph()
    return stack[-1]


def grad_enabled() -> bool:
    _stack()
    return _local.grad_enabled


@contextmanager
def no_grad():
    _stack()
    prev = _local.grad_enabled
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


_DEBUG = _env.debug()


def set_debug(flag: bool) -> None:
    global _DEBUG
    _DEBUG = flag


def make_result(op: str, inputs: Sequence, data: np.ndarray, backward_fn) -> Tensor:
    """Wrap an op's output and put it on the tape if any input needs a gradient."""
    if _DEBUG and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op}: produced non-finite values")
    out = Tensor(data)
    tensors = tuple(t for t in inputs if isinstance(t, Tensor))
    if grad_enabled() and any(t.requires_grad for t in tensors):
        out.requires_grad = True
        node = Node(op, tuple(inputs), out, backward_fn)
        out._node = node
        current_graph().record(node)
    return out


def backward(graph: Graph, seed_grads, outputs: Optional[Sequence[Tensor]] = None) -> None:
    """Propagate ``seed_grads`` from ``outputs`` to every leaf that requires grad.

    Leaf gradients accumulate into ``leaf.grad``. The graph is consumed and its
    saved activations are released.
    """
    if graph.consumed:
        raise GraphConsumedError("graph already consumed by a previous backward pass")
    outputs = list(outputs if outputs is not None else graph.outputs)
    if not outputs:
        if not graph.nodes:
            raise ValueError("empty graph: nothing to differentiate")
        outputs = [graph.nodes[-1].output]
    if len(seed_grads) != len(outputs):
        raise ShapeError(f"{len(seed_grads)} seed gradients for {len(outputs)} outputs")

    pending = {}

    def _push(t: Tensor, g):
        if not t.requires_grad or g is None:
            return
        if g.shape != t.data.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match tensor shape {t.data.shape}")
        if t.is_leaf:
            g = g.astype(t.data.dtype, copy=False)
            t.grad = g.copy() if t.grad is None else t.grad + g
        else:
            key = id(t)
            pending[key] = g if key not in pending else pending[key] + g

    for t, g in zip(outputs, seed_grads):
        _push(t, np.asarray(g))

    for node in reversed(graph.nodes):
        g = pending.pop(id(node.output), None)
        if g is None:
            continue
        grads = node.backward(g)
        for inp, gi in zip(node.inputs, grads):
            if isinstance(inp, Tensor):
                _push(inp, gi)

    graph.consumed = True
    graph.nodes.clear()
    graph.outputs.clear()


def finite_difference_grad(f: Callable[[Tensor], float], x: Tensor, eps: float = 1e-3) -> Tensor:
    """Central-difference gradient of a scalar function, one element at a time.

    ``f`` receives a fresh float64 tensor each evaluation and must return a
    scalar (a Python number or a 1x1x1x1 tensor).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = x.data.astype(np.float64)
    grad = np.zeros_like(base)

    def _eval(arr):
        with no_grad():
            v = f(Tensor(arr))
        v = float(np.asarray(v.data if isinstance(v, Tensor) else v).reshape(()))
        if not np.isfinite(v):
            raise NonFiniteError("finite_difference_grad: f returned a non-finite value")
        return v

    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = _eval(base)
        flat[i] = orig - eps
        fm = _eval(base)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * eps)
    return Tensor(grad)


def relative_error(a, b, floor: float = 1e-6) -> float:
    """max |a-b| scaled by the larger of the two max-norms (floored)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), floor)
    return float(np.abs(a - b).max(initial=0.0) / scale)
