"""Tensor value type, graph recording and reverse-mode accumulation."""

from __future__ import annotations

import contextlib
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

_DTYPES = (np.float32, np.float64)
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """Dense row-major real array plus the graph edge that produced it.

    Leaves are created directly; interior nodes are created by
    :meth:`Function.apply`. A leaf with ``requires_grad=False`` is a
    constant; :class:`vmcnet.params.Parameter` adds a name and a frozen flag.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _DTYPES:
            arr = arr.astype(np.float64)
        self.data: np.ndarray = np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self._ctx: Optional[Function] = None
        self._parents: Tuple[Tensor, ...] = ()

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._ctx is None

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"

    # arithmetic sugar; the ops module registers the implementations
    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops

        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops

        return ops.mul(self, -1.0)

    def __matmul__(self, other):
        from . import ops

        return ops.matmul(self, other)

    def reshape(self, *shape):
        from . import ops

        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops

        return ops.transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        from . import ops

        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops

        return ops.mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


class Function:
    """One differentiable operation.

    Subclasses implement ``forward`` on ndarrays (stashing whatever the
    backward pass needs on ``self``) and ``backward`` returning one gradient
    per tensor input (``None`` where no gradient flows).
    """

    name = "op"

    def forward(self, *arrays: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs, **kwargs) -> Tensor:
        fn = cls(**kwargs)
        tensors = tuple(as_tensor(t) for t in inputs)
        out = fn.forward(*(t.data for t in tensors))
        if not np.all(np.isfinite(out)):
            raise FloatingPointError(f"{cls.name}: non-finite value in output")
        result = Tensor(out)
        fn.needs_grad = tuple(t.requires_grad for t in tensors)
        if _grad_enabled and any(fn.needs_grad):
            result.requires_grad = True
            result._ctx = fn
            result._parents = tensors
        return result


def toposort(root: Tensor) -> List[Tensor]:
    """Nodes reachable from ``root`` (through grad-requiring edges), inputs first."""
    order: List[Tensor] = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, wrt: Optional[Iterable[Tensor]] = None) -> Dict[int, np.ndarray]:
    """Reverse-mode accumulation from a scalar ``loss``.

    Returns a map ``id(leaf) -> gradient`` for every grad-requiring leaf that
    the loss depends on. Frozen leaves never require grad and so never
    appear. If ``wrt`` is given, every listed leaf must be connected.
    """
    if loss.data.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")
    order = toposort(loss)
    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: Dict[int, np.ndarray] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._ctx is None:
            if node.requires_grad:
                leaves[id(node)] = g
            continue
        in_grads = node._ctx.backward(g)
        for parent, pg in zip(node._parents, in_grads):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=parent.dtype)
            if pg.shape != parent.shape:
                raise RuntimeError(
                    f"{node._ctx.name}: gradient shape {pg.shape} != input shape {parent.shape}"
                )
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    if wrt is not None:
        for leaf in wrt:
            if id(leaf) not in leaves and leaf.requires_grad:
                name = getattr(leaf, "name", repr(leaf))
                raise ValueError(f"leaf {name} is not connected to the loss")
    return leaves
