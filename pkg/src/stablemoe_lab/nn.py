"""Parameter containers and the small layers shared by the backbone and the experts."""

from __future__ import annotations

import hashlib
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor

INIT_STD = 0.02


class Module:
    """Walks attributes to find parameters, in definition order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{name}.{i}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self) -> list[Parameter]:
        return [p for p in self.parameters() if p.requires_grad]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.values.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.values.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        if missing:
            raise KeyError(f"state is missing parameters: {sorted(missing)}")
        for name, p in own.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ValueError(f"{name}: shape {value.shape} != {p.shape}")
            p.values = value.astype(p.dtype).copy()

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.values = p.values.astype(dtype)
            p.grad = None
        return self


def checksum(params: list[Parameter]) -> str:
    h = hashlib.sha256()
    for p in params:
        h.update(np.ascontiguousarray(p.values).tobytes())
    return h.hexdigest()


def normal_init(rng: np.random.Generator, shape, std: float = INIT_STD) -> np.ndarray:
    return rng.normal(0.0, std, size=shape).astype(T.DEFAULT_DTYPE)


class Linear(Module):
    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int, zero: bool = False):
        w = np.zeros((d_in, d_out), T.DEFAULT_DTYPE) if zero else normal_init(rng, (d_in, d_out))
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(d_out, T.DEFAULT_DTYPE))

    def __call__(self, x: Tensor) -> Tensor:
        return T.add(T.matmul(x, self.weight), self.bias)


class LayerNorm(Module):
    def __init__(self, d: int):
        self.gamma = Parameter(np.ones(d, T.DEFAULT_DTYPE))
        self.beta = Parameter(np.zeros(d, T.DEFAULT_DTYPE))

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta)


class FeedForward(Module):
    """Pre-norm FFN sublayer returning only its residual branch ``W2 gelu(W1 LN(x))``.

    The output projection starts at zero, so a fresh sublayer contributes nothing.
    """

    def __init__(self, rng: np.random.Generator, d: int, inner: int):
        self.norm = LayerNorm(d)
        self.up = Linear(rng, d, inner)
        self.down = Linear(rng, inner, d, zero=True)

    def __call__(self, x: Tensor) -> Tensor:
        return self.down(T.gelu(self.up(self.norm(x))))
