"""Dense tensors and the tape that drives reverse-mode differentiation.

Every differentiable op builds its result through :func:`record`, which
stamps a monotonically increasing sequence number on the produced
:class:`Node`. Backward simply replays reachable nodes in decreasing
sequence order, i.e. exact reverse execution order.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any, Callable, Iterator, Optional, Sequence

import numpy as np

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_seq = itertools.count()
_state = threading.local()


def _tapes() -> list["Tape"]:
    if not hasattr(_state, "tapes"):
        _state.tapes = []
    return _state.tapes


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph construction (ops are still logged to active tapes)."""
    prev = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    """N-d real array with optional gradient tracking.

    ``data`` is treated as immutable by every op; results are always fresh
    arrays. ``grad`` is populated by :meth:`backward` on leaves that have
    ``requires_grad=True``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_node", "name")

    def __init__(self, data: Any, requires_grad: bool = False, dtype: Any = None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32 if dtype is None else dtype)
        if arr.ndim > 4:
            raise ValueError(f"tensors have at most 4 axes, got shape {arr.shape}")
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: Any = None) -> list["Node"]:
        return backward(self, grad)

    def __add__(self, other: Any) -> "Tensor":
        from cmunet.engine import ops

        return ops.add(self, other)

    __radd__ = __add__

    def __mul__(self, other: Any) -> "Tensor":
        from cmunet.engine import ops

        return ops.mul(self, other)

    __rmul__ = __mul__

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"


@dataclass(eq=False)
class Node:
    """One executed op. ``inputs`` and ``backward_fn`` are only kept when a
    gradient can flow through the op."""

    seq: int
    op: str
    inputs: tuple[Tensor, ...]
    input_shapes: tuple[tuple[int, ...], ...]
    out_shape: tuple[int, ...]
    backward_fn: BackwardFn | None
    meta: dict[str, Any] = field(default_factory=dict)


class Tape:
    """Records every op executed while the context is active.

    Used for structural inspection (which ops ran, on what shapes); gradient
    flow itself does not depend on a tape being open.
    """

    def __init__(self) -> None:
        self.entries: list[Node] = []

    def __enter__(self) -> "Tape":
        _tapes().append(self)
        return self

    def __exit__(self, *exc: Any) -> None:
        _tapes().remove(self)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[Node]:
        return iter(self.entries)

    def ops(self) -> list[str]:
        return [e.op for e in self.entries]

    def find(self, op: str | None = None, **meta: Any) -> list[Node]:
        found = []
        for e in self.entries:
            if op is not None and e.op != op:
                continue
            if all(e.meta.get(k) == v for k, v in meta.items()):
                found.append(e)
        return found


def as_tensor(x: Any, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def record(
    op: str,
    inputs: Sequence[Tensor],
    out: np.ndarray,
    backward_fn: BackwardFn,
    **meta: Any,
) -> Tensor:
    """Wrap ``out`` in a Tensor and register ``backward_fn`` for it.

    ``backward_fn`` maps the upstream gradient to a sequence aligned with
    ``inputs`` (``None`` for inputs that receive no gradient).
    """
    if not np.all(np.isfinite(out)):
        from cmunet.errors import NumericError

        raise NumericError(f"{op} produced non-finite values")
    needs = grad_enabled() and any(t.requires_grad for t in inputs)
    tensor = Tensor(out, requires_grad=needs, dtype=out.dtype)
    node = Node(
        seq=next(_seq),
        op=op,
        inputs=tuple(inputs) if needs else (),
        input_shapes=tuple(t.shape for t in inputs),
        out_shape=out.shape,
        backward_fn=backward_fn if needs else None,
        meta=meta,
    )
    if needs:
        tensor._node = node
    for tape in _tapes():
        tape.entries.append(node)
    return tensor


def backward(root: Tensor, grad: Any = None) -> list[Node]:
    """Accumulate d(root)/d(leaf) into every reachable leaf's ``grad``.

    Returns the visited nodes in the order their backward rules ran.
    """
    if grad is None:
        if root.data.size != 1:
            raise ValueError("grad must be given for non-scalar roots")
        grad = np.ones_like(root.data)
    grad = np.asarray(grad, dtype=root.dtype)
    if grad.shape != root.shape:
        raise ValueError(f"grad shape {grad.shape} != tensor shape {root.shape}")

    if root._node is None:
        if root.requires_grad:
            root.grad = grad.copy() if root.grad is None else root.grad + grad
        return []

    nodes: dict[int, Node] = {}
    stack = [root._node]
    while stack:
        node = stack.pop()
        if node.seq in nodes:
            continue
        nodes[node.seq] = node
        for t in node.inputs:
            if t._node is not None and t._node.seq not in nodes:
                stack.append(t._node)

    pending: dict[int, np.ndarray] = {root._node.seq: grad}
    visited: list[Node] = []
    for seq in sorted(nodes, reverse=True):
        node = nodes[seq]
        g = pending.pop(seq, None)
        if g is None:
            continue
        visited.append(node)
        in_grads = node.backward_fn(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if t._node is not None:
                key = t._node.seq
                pending[key] = gi if key not in pending else pending[key] + gi
            else:
                t.grad = np.array(gi, dtype=t.dtype) if t.grad is None else t.grad + gi
    return visited
