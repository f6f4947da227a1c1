"""Tensor value type and the reverse-mode tape that records operations on it."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class TapeError(RuntimeError):
    """Raised on misuse of a tape (mixed tapes, non-scalar loss, ...)."""


def _as_array(data) -> np.ndarray:
    arr = np.array(data, dtype=np.float64, order="C")
    arr.flags.writeable = False
    return arr


class Tensor:
    """Dense float64 array with an optional handle into a :class:`Tape`.

    Tensors are immutable: the underlying buffer is marked read-only and
    every operation produces a new tensor.
    """

    __slots__ = ("data", "tape", "node_id")

    def __init__(self, data, tape: "Tape | None" = None, node_id: int | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if isinstance(data, np.ndarray) and data.dtype == np.float64 and not data.flags.writeable:
            self.data = data
        else:
            self.data = _as_array(data)
        self.tape = tape
        self.node_id = node_id

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # internal fast path: takes ownership of a freshly computed array
        arr = np.asarray(arr, dtype=np.float64)
        if not arr.flags.c_contiguous or not arr.flags.owndata:
            arr = arr.copy()
        arr.flags.writeable = False
        return cls(arr)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def tracked(self) -> bool:
        return self.tape is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def flat(self) -> np.ndarray:
        """Row-major flat view of the buffer."""
        return self.data.reshape(-1)

    def __repr__(self) -> str:
        tag = f", node={self.node_id}" if self.tracked else ""
        return f"Tensor(shape={self.shape}{tag})"

    # operator sugar; the functional API lives in banlab.tensor.ops
    def __matmul__(self, other):
        from banlab.tensor import ops
        return ops.matmul(self, other)

    def __mul__(self, other):
        from banlab.tensor import ops
        if isinstance(other, Tensor):
            return ops.hadamard(self, other)
        return ops.scale(self, float(other))

    __rmul__ = __mul__

    def __add__(self, other):
        from banlab.tensor import ops
        return ops.add(self, other)

    def __sub__(self, other):
        from banlab.tensor import ops
        return ops.sub(self, other)

    def __neg__(self):
        from banlab.tensor import ops
        return ops.scale(self, -1.0)

    @property
    def T(self):
        from banlab.tensor import ops
        return ops.transpose(self)


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


@dataclass
class Node:
    op: str
    parents: tuple[int, ...]
    backward: BackwardFn | None
    shape: tuple[int, ...]


@dataclass
class Tape:
    """Append-only record of tracked operations.

    Node ids are list positions, so parents always precede children and a
    reverse sweep over the list is a valid reverse topological order.
    """

    nodes: list[Node] = field(default_factory=list)
    gradients: dict[int, np.ndarray] = field(default_factory=dict)

    def watch(self, data, name: str = "leaf") -> Tensor:
        """Create a tracked leaf tensor."""
        t = data if isinstance(data, Tensor) else Tensor(data)
        node_id = len(self.nodes)
        self.nodes.append(Node(name, (), None, t.shape))
        return Tensor(t.data, self, node_id)

    def record(self, op: str, out: np.ndarray, inputs: Sequence[Tensor], backward: BackwardFn) -> Tensor:
        node_id = len(self.nodes)
        parents = tuple(-1 if t.tape is None else t.node_id for t in inputs)
        self.nodes.append(Node(op, parents, backward, out.shape))
        res = Tensor._wrap(out)
        res.tape = self
        res.node_id = node_id
        return res

    def is_leaf(self, node_id: int) -> bool:
        return not self.nodes[node_id].parents and self.nodes[node_id].backward is None

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Populate :attr:`gradients` with d(loss)/d(node) for every node.

        Leaves the loss does not depend on receive zero gradients.
        """
        if loss.tape is not self:
            raise TapeError("loss is not tracked on this tape")
        if loss.size != 1:
            raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {loss.node_id: np.ones(loss.shape)}
        for node_id in range(loss.node_id, -1, -1):
            g = grads.get(node_id)
            node = self.nodes[node_id]
            if g is None or node.backward is None:
                continue
            parent_grads = node.backward(g)
            for pid, pg in zip(node.parents, parent_grads):
                if pid < 0 or pg is None:
                    continue
                if pid in grads:
                    grads[pid] = grads[pid] + pg
                else:
                    grads[pid] = pg
        for node_id, node in enumerate(self.nodes):
            if self.is_leaf(node_id) and node_id not in grads:
                grads[node_id] = np.zeros(node.shape)
        self.gradients = grads
        return grads

    def grad(self, t: Tensor) -> np.ndarray:
        if t.tape is not self:
            raise TapeError("tensor is not tracked on this tape")
        return self.gradients[t.node_id]


def backward(loss: Tensor, tape: Tape | None = None) -> dict[int, np.ndarray]:
    """Run reverse-mode differentiation of a scalar ``loss``."""
    tape = tape if tape is not None else loss.tape
    if tape is None:
        raise TapeError("loss is not tracked on any tape")
    return tape.backward(loss)


def tape_of(*tensors: Tensor) -> Tape | None:
    tape = None
    for t in tensors:
        if t.tape is None:
            continue
        if tape is None:
            tape = t.tape
        elif t.tape is not tape:
            raise TapeError("operands are tracked on different tapes")
    return tape


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)
