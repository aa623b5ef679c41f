"""Named parameter collections and initialisers."""

from __future__ import annotations

import math
from collections import OrderedDict
from typing import Iterator

import numpy as np

from .numcore import Tensor


class ModelParams:
    """Ordered mapping from dotted names to parameter tensors.

    Insertion order is the canonical order used for checkpoints and gradient
    checks.
    """

    def __init__(self):
        self._p: "OrderedDict[str, Tensor]" = OrderedDict()

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._p:
            raise KeyError(f"duplicate parameter {name}")
        t = Tensor(value, requires_grad=True, name=name, dtype=value.dtype)
        self._p[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._p[name]

    def __contains__(self, name: str) -> bool:
        return name in self._p

    def __iter__(self) -> Iterator[str]:
        return iter(self._p)

    def __len__(self):
        return len(self._p)

    def names(self) -> list[str]:
        return list(self._p)

    def items(self):
        return self._p.items()

    def values(self):
        return self._p.values()

    def size(self) -> int:
        return sum(t.data.size for t in self._p.values())

    def zero_grad(self) -> None:
        for t in self._p.values():
            t.grad = None

    def astype(self, dtype) -> "ModelParams":
        out = ModelParams()
        for k, t in self._p.items():
            out.add(k, t.data.copy() if dtype is None else t.data.astype(dtype))
        return out

    def copy(self) -> "ModelParams":
        return self.astype(None)

    def state(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, t.data) for k, t in self._p.items())


class Init:
    """Seeded initialiser writing into a :class:`ModelParams`."""

    def __init__(self, params: ModelParams, seed: int, dtype=np.float32):
        self.params = params
        self.rng = np.random.default_rng(seed)
        self.dtype = np.dtype(dtype)

    def uniform(self, name: str, shape, fan_in: int, fan_out: int | None = None) -> Tensor:
        fan_out = fan_in if fan_out is None else fan_out
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        return self.params.add(name, self.rng.uniform(-bound, bound, size=shape).astype(self.dtype))

    def normal(self, name: str, shape, std: float) -> Tensor:
        return self.params.add(name, (self.rng.standard_normal(shape) * std).astype(self.dtype))

    def const(self, name: str, shape, value: float) -> Tensor:
        return self.params.add(name, np.full(shape, value, dtype=self.dtype))

    def linear(self, prefix: str, n_in: int, n_out: int, bias: bool = True) -> None:
        self.uniform(f"{prefix}.w", (n_in, n_out), n_in, n_out)
        if bias:
            self.const(f"{prefix}.b", (n_out,), 0.0)

    def norm(self, prefix: str, d: int) -> None:
        self.const(f"{prefix}.g", (d,), 1.0)
        self.const(f"{prefix}.b", (d,), 0.0)
