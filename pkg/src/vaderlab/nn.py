"""Small module system: named parameters, affine layers with low-rank adapters."""

from __future__ import annotations

import copy
from typing import Iterator

import numpy as np

from vaderlab import autograd as ag
from vaderlab.autograd import Parameter, Tensor


class Module:
    """Container of named :class:`Parameter` objects and child modules."""

    def named_parameters(self) -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            if isinstance(value, Parameter):
                yield value.name, value
            elif isinstance(value, Module):
                yield from value.named_parameters()
            elif isinstance(value, dict):
                for v in value.values():
                    if isinstance(v, Module):
                        yield from v.named_parameters()

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self) -> list[Parameter]:
        return [p for p in self.parameters() if p.trainable]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {p.name: p.data.copy() for p in self.parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        unknown = set(state) - set(params)
        if strict and (missing or unknown):
            raise KeyError(f"state mismatch: missing={sorted(missing)} unknown={sorted(unknown)}")
        for name, value in state.items():
            if name in params:
                p = params[name]
                if p.shape != value.shape:
                    raise ValueError(f"{name}: shape {value.shape} != {p.shape}")
                p.data = np.asarray(value, dtype=p.data.dtype).copy()

    def freeze(self) -> None:
        for p in self.parameters():
            p.trainable = False

    def clone(self):
        """Deep copy with fresh tensor identities."""
        twin = copy.deepcopy(self)
        for p in twin.parameters():
            p.uid = next(ag._uid)
            p.grad = None
        return twin

    def astype(self, dtype) -> None:
        for p in self.parameters():
            p.data = p.data.astype(dtype)


class Linear(Module):
    """``x @ W + b`` with an optional low-rank delta ``x @ A @ B``."""

    def __init__(self, name: str, d_in: int, d_out: int, rng: np.random.Generator,
                 scale: float | None = None, bias: bool = True):
        self.name = name
        self.d_in, self.d_out = d_in, d_out
        std = scale if scale is not None else 1.0 / np.sqrt(d_in)
        self.weight = Parameter(f"{name}.weight", rng.standard_normal((d_in, d_out)) * std)
        self.bias = Parameter(f"{name}.bias", np.zeros(d_out)) if bias else None
        self.lora_a: Parameter | None = None
        self.lora_b: Parameter | None = None

    def __call__(self, x: Tensor) -> Tensor:
        y = ag.affine(x, self.weight, self.bias)
        if self.lora_a is not None:
            y = y + ag.affine(ag.affine(x, self.lora_a), self.lora_b)
        return y

    def attach_lora(self, rank: int, rng: np.random.Generator) -> None:
        dtype = self.weight.data.dtype
        a = rng.standard_normal((self.d_in, rank)) / np.sqrt(self.d_in)
        self.lora_a = Parameter(f"{self.name}.lora_a", a, dtype=dtype)
        self.lora_b = Parameter(f"{self.name}.lora_b", np.zeros((rank, self.d_out)), dtype=dtype)

    def merge_lora(self) -> None:
        if self.lora_a is None:
            return
        self.weight.data = self.weight.data + self.lora_a.data @ self.lora_b.data
        self.lora_a = self.lora_b = None


def count(params) -> int:
    return int(sum(p.size for p in params))
