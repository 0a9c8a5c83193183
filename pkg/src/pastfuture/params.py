"""Named parameter collections and initializers."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .autodiff import Tensor
from .errors import ContractError


class ParamStore:
    """Registry of trainable tensors keyed by unique names.

    Iteration order is lexicographic by name, which fixes the order used by
    the optimizer and the checkpoint payload.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, t: Tensor) -> Tensor:
        if name in self._params:
            raise ContractError(f"duplicate parameter name {name!r}")
        t.requires_grad = True
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._params[name]
        except KeyError:
            raise KeyError(f"unknown parameter {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return sorted(self._params)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        for name in sorted(self._params):
            yield name, self._params[name]

    def zero_grads(self) -> None:
        for p in self._params.values():
            p.grad = None

    def total_size(self) -> int:
        return sum(p.size for p in self._params.values())


def xavier_uniform(rng: np.random.Generator, shape: tuple,
                   dtype=np.float64) -> np.ndarray:
    """Glorot uniform init; for stacked weights the last two dims are fans."""
    if len(shape) < 2:
        raise ContractError(f"xavier needs >= 2 dims, got {shape}")
    fan_in, fan_out = shape[-2], shape[-1]
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def zeros(shape: tuple, dtype=np.float64) -> np.ndarray:
    return np.zeros(shape, dtype=dtype)


def ones(shape: tuple, dtype=np.float64) -> np.ndarray:
    return np.ones(shape, dtype=dtype)
