"""Parameter containers and the small layer set used by the VAE and U-Net."""
from __future__ import annotations

import math
from collections.abc import Iterator, Mapping

import numpy as np

from . import functional as F
from .tensor import Tensor, default_dtype


class ParameterSet(Mapping):
    """Named learnable tensors; iteration is always sorted by name."""

    def __init__(self, items: Mapping[str, Tensor] | None = None):
        self._items: dict[str, Tensor] = {}
        for name, t in (items or {}).items():
            self.add(name, t)

    def add(self, name: str, t: Tensor) -> None:
        if name in self._items:
            raise KeyError(f"duplicate parameter name {name!r}")
        self._items[name] = t

    def __getitem__(self, name: str) -> Tensor:
        return self._items[name]

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self._items))

    def __len__(self) -> int:
        return len(self._items)

    def num_elements(self) -> int:
        return int(sum(t.size for t in self._items.values()))

    def zero_grad(self) -> None:
        for t in self._items.values():
            t.grad = np.zeros_like(t.data)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: self._items[name].data.copy() for name in self}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        missing = set(self._items) - set(state)
        extra = set(state) - set(self._items)
        if missing or extra:
            raise KeyError(f"parameter names differ: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, arr in state.items():
            t = self._items[name]
            if tuple(arr.shape) != t.shape:
                raise ValueError(f"shape mismatch for {name}: {tuple(arr.shape)} vs {t.shape}")
            t.data = np.ascontiguousarray(arr, dtype=t.dtype)

    def subset(self, prefix: str) -> "ParameterSet":
        return ParameterSet({n: t for n, t in self._items.items() if n.startswith(prefix)})


class Module:
    """Minimal module base: attributes that are Tensors or Modules are registered."""

    def parameters(self) -> ParameterSet:
        ps = ParameterSet()
        for name, t in self._named_tensors(""):
            ps.add(name, t)
        return ps

    def _named_tensors(self, prefix: str):
        for key, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                yield prefix + key, val
            elif isinstance(val, Module):
                yield from val._named_tensors(prefix + key + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item._named_tensors(f"{prefix}{key}.{i}.")

    def to_dtype(self, dtype) -> "Module":
        for _, t in self._named_tensors(""):
            t.data = t.data.astype(dtype)
            t.grad = None
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _param(arr: np.ndarray) -> Tensor:
    return Tensor(arr, requires_grad=True, dtype=default_dtype())


def kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int = 3, stride: int = 1, rng=None, zero_init: bool = False):
        rng = rng if rng is not None else np.random.default_rng(0)
        shape = (cout, cin, k, k)
        w = np.zeros(shape) if zero_init else kaiming_uniform(rng, shape, cin * k * k)
        self.weight = _param(w)
        self.bias = _param(np.zeros(cout))
        self.stride = stride

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, stride=self.stride)


class Linear(Module):
    def __init__(self, fin: int, fout: int, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = _param(kaiming_uniform(rng, (fout, fin), fin))
        self.bias = _param(np.zeros(fout))

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class GroupNorm(Module):
    def __init__(self, channels: int, groups: int = 8):
        groups = min(groups, channels)
        while channels % groups:
            groups -= 1
        self.groups = groups
        self.weight = _param(np.ones(channels))
        self.bias = _param(np.zeros(channels))

    def forward(self, x: Tensor) -> Tensor:
        return F.group_norm(x, self.groups, self.weight, self.bias)


class Embedding(Module):
    def __init__(self, num: int, dim: int, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = _param(rng.normal(0.0, 1.0, size=(num, dim)))

    def forward(self, ids) -> Tensor:
        return F.embedding(self.weight, ids)
