"""Ordered, named collection of trainable tensors."""

from __future__ import annotations

import numpy as np

from ..errors import DimensionError
from .tensor import Tensor


class ParamSet:
    """Holds parameters in insertion order under unique string names.

    The order is the canonical one used by optimizer state and checkpoint
    serialization, so it must be identical across runs for a given model
    configuration.
    """

    def __init__(self):
        self._items: dict[str, Tensor] = {}

    def add(self, name: str, data, dtype=np.float32) -> Tensor:
        if name in self._items:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(data), requires_grad=True, dtype=dtype)
        self._items[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._items[name]

    def __contains__(self, name: str) -> bool:
        return name in self._items

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self):
        return iter(self._items.values())

    def names(self) -> list[str]:
        return list(self._items.keys())

    def items(self):
        return self._items.items()

    def n_params(self) -> int:
        return sum(t.data.size for t in self._items.values())

    def zero_grad(self) -> None:
        for t in self._items.values():
            t.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self._items.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = [n for n in self._items if n not in state]
        extra = [n for n in state if n not in self._items]
        if missing or extra:
            raise DimensionError(
                f"parameter set mismatch: missing {missing or 'none'}, unexpected {extra or 'none'}"
            )
        for name, t in self._items.items():
            arr = np.asarray(state[name])
            if arr.shape != t.data.shape:
                raise DimensionError(
                    f"parameter {name!r}: stored shape {arr.shape} != expected {t.data.shape}"
                )
            t.data = np.ascontiguousarray(arr, dtype=t.data.dtype)

    def astype(self, dtype) -> "ParamSet":
        """Copy of this set with every tensor cast to dtype."""
        out = ParamSet()
        for name, t in self._items.items():
            out.add(name, t.data, dtype=dtype)
        return out
