"""Named parameter registry and per-run RNG plumbing."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .tensor import Tensor, derive_seed


class ParamStore:
    """Registry of named learnable tensors with deterministic initialization.

    Registration order is fixed by construction order, and the init stream
    is seeded once, so two stores built the same way hold identical values.
    """

    def __init__(self, seed: int):
        self._params: dict[str, Tensor] = {}
        self._rng = np.random.Generator(np.random.PCG64(derive_seed(seed, 0x1217)))

    def _register(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name '{name}'")
        t = Tensor(value, requires_grad=True)
        self._params[name] = t
        return t

    def normal(self, name: str, shape: tuple, std: float = 0.02) -> Tensor:
        return self._register(name, self._rng.normal(0.0, std, size=shape))

    def zeros(self, name: str, shape: tuple) -> Tensor:
        return self._register(name, np.zeros(shape))

    def ones(self, name: str, shape: tuple) -> Tensor:
        return self._register(name, np.ones(shape))

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def items(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._params.items())

    def names(self) -> list[str]:
        return list(self._params.keys())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    @property
    def n_values(self) -> int:
        return sum(t.size for t in self._params.values())


def decays(name: str) -> bool:
    """Weight decay applies to weights only, not biases or layer-norm terms."""
    leaf = name.rsplit("/", 1)[-1]
    return not (leaf.startswith("b") or leaf in ("gain", "bias"))


class RunCtx:
    """Forward-pass context: mode flag plus a counter-based dropout stream.

    Each dropout site consumes one seed derived from (run seed, step, call
    index), so a step's mask pattern depends only on those integers.
    """

    def __init__(self, training: bool, seed: int = 0, step: int = 0):
        self.training = training
        self._seed = seed
        self._step = step
        self._calls = 0

    def drop_seed(self) -> int:
        s = derive_seed(self._seed, self._step, self._calls)
        self._calls += 1
        return s


EVAL_CTX = RunCtx(training=False)
