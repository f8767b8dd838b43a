"""Reverse-mode automatic differentiation on numpy arrays.

A Tensor wraps a float32 or float64 ndarray plus an optional gradient and a
backward closure linking it to its parents. Calling ``backward()`` on a scalar
loss walks the graph in reverse topological order and accumulates gradients
into every tensor with ``requires_grad`` set. Tensors are treated as immutable
once built; training code mutates parameter ``.data`` buffers only between
graph constructions.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from ..errors import DimensionError

_ALLOWED_DTYPES = (np.float32, np.float64)

# Global switch consulted at op-construction time. Inside no_grad() blocks no
# backward closures are built, so forward passes allocate nothing extra.
_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable graph construction within the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """A node in the computation graph.

    Attributes:
        data: the underlying C-contiguous ndarray (float32 or float64).
        grad: accumulated gradient of the same shape, or None.
        requires_grad: whether backward() should deposit a gradient here.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bwd")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _ALLOWED_DTYPES:
            if dtype is None and np.issubdtype(arr.dtype, np.number):
                arr = arr.astype(np.float64)
            else:
                raise TypeError(f"Tensor dtype must be float32 or float64, got {arr.dtype}")
        # ascontiguousarray would promote 0-d arrays to 1-d; keep scalars 0-d
        self.data = arr if arr.ndim == 0 else np.ascontiguousarray(arr)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._bwd = None

    @classmethod
    def _node(cls, data: np.ndarray, requires_grad: bool) -> "Tensor":
        """Internal fast-path constructor for op outputs (data already validated)."""
        t = cls.__new__(cls)
        t.data = data
        t.grad = None
        t.requires_grad = requires_grad
        t._parents = ()
        t._bwd = None
        return t

    # -- introspection -------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def all_finite(self) -> bool:
        return bool(np.isfinite(self.data).all())

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() requires a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # -- gradient machinery --------------------------------------------

    def accum_grad(self, g: np.ndarray, own: bool = False) -> None:
        """Add g to this tensor's gradient.

        The first deposit is copied unless the caller owns g outright
        (own=True), so later in-place accumulation can never corrupt a buffer
        shared with another node.
        """
        if self.grad is None:
            self.grad = g if own else g.copy()
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad=None) -> None:
        """Run reverse-mode accumulation from this tensor.

        Without an explicit seed the tensor must be a scalar.
        """
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(
                    f"backward() without a seed gradient requires a scalar, got shape {self.shape}"
                )
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype)
            if grad.shape != self.data.shape:
                raise DimensionError(
                    f"seed gradient shape {grad.shape} does not match tensor shape {self.shape}"
                )

        # Iterative depth-first topological sort; recursion would overflow on
        # deep graphs.
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            nid = id(node)
            if nid in visited:
                continue
            visited.add(nid)
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited and (p._bwd is not None or p.requires_grad):
                    stack.append((p, False))

        self.accum_grad(grad, own=True)
        for node in reversed(topo):
            if node._bwd is not None and node.grad is not None:
                node._bwd(node.grad)

    # -- operator sugar (thin wrappers over ops) ------------------------

    def __add__(self, other):
        from . import ops

        return ops.add(self, _coerce(other, self))

    def __radd__(self, other):
        return self.__add__(other)

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, _coerce(other, self))

    def __rsub__(self, other):
        from . import ops

        return ops.sub(_coerce(other, self), self)

    def __mul__(self, other):
        from . import ops

        if isinstance(other, (int, float)):
            return ops.scale(self, float(other))
        return ops.mul(self, _coerce(other, self))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        from . import ops

        if isinstance(other, (int, float)):
            return ops.scale(self, 1.0 / float(other))
        return ops.div(self, _coerce(other, self))

    def __neg__(self):
        from . import ops

        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops

        return ops.matmul(self, _coerce(other, self))

    def __getitem__(self, idx):
        from . import ops

        return ops.getitem(self, idx)

    def reshape(self, *shape):
        from . import ops

        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *perm):
        from . import ops

        if len(perm) == 1 and isinstance(perm[0], (tuple, list)):
            perm = tuple(perm[0])
        return ops.transpose(self, perm)

    def sum(self, axis=None, keepdims: bool = False):
        from . import ops

        return ops.sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        from . import ops

        return ops.mean(self, axis=axis, keepdims=keepdims)


def _coerce(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.data.dtype))
