"""Named parameter store with per-group trainability."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .tensor import Rng, Tensor

GROUPS = (
    "vision_encoder",
    "bridge",
    "aggregator",
    "mlp_proj",
    "lm_base",
    "adapter_img",
    "adapter_reg",
    "gates",
    "soft_prompt",
    "embeddings",
)


@dataclass
class Param:
    tensor: Tensor
    group: str
    trainable: bool = False


class ParamStore:
    """Ordered map ``name -> Param``. Insertion order is the checkpoint order."""

    def __init__(self):
        self._params: dict[str, Param] = {}

    def add(self, name: str, data, group: str) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        if group not in GROUPS:
            raise KeyError(f"unknown parameter group {group!r}")
        t = Tensor(np.array(data, dtype=np.float64), name=name)
        self._params[name] = Param(t, group)
        return t

    def normal(self, name: str, shape, group: str, rng: Rng, stddev: float) -> Tensor:
        n = int(np.prod(shape))
        return self.add(name, rng.normal(n).reshape(shape) * stddev, group)

    def zeros(self, name: str, shape, group: str) -> Tensor:
        return self.add(name, np.zeros(shape), group)

    def ones(self, name: str, shape, group: str) -> Tensor:
        return self.add(name, np.ones(shape), group)

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name].tensor

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def param(self, name: str) -> Param:
        return self._params[name]

    def group_of(self, name: str) -> str:
        return self._params[name].group

    def names_in(self, group: str) -> list[str]:
        return [n for n, p in self._params.items() if p.group == group]

    def view(self, prefix: str) -> "ParamView":
        return ParamView(self, prefix)

    def set_trainable(self, groups) -> None:
        """Trainable iff the parameter's group is in ``groups``; everything
        else is frozen and its grad dropped."""
        groups = set(groups)
        for p in self._params.values():
            p.trainable = p.group in groups
            p.tensor.requires_grad = p.trainable
            p.tensor.grad = None

    def trainable_names(self) -> list[str]:
        return [n for n, p in self._params.items() if p.trainable]

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.tensor.grad = None

    def snapshot(self, groups=None) -> dict[str, bytes]:
        """Raw bytes of each parameter, for freezing checks."""
        return {
            n: p.tensor.data.tobytes()
            for n, p in self._params.items()
            if groups is None or p.group in groups
        }

    def copy(self) -> "ParamStore":
        other = ParamStore()
        for n, p in self._params.items():
            t = other.add(n, p.tensor.data.copy(), p.group)
            other._params[n].trainable = p.trainable
            t.requires_grad = p.trainable
        return other

    def num_elements(self, group: str | None = None) -> int:
        return sum(
            p.tensor.numel() for p in self._params.values() if group is None or p.group == group
        )


class ParamView:
    """Prefix-scoped read access: ``view["wq"]`` is ``store[prefix + ".wq"]``."""

    def __init__(self, store: ParamStore, prefix: str):
        self.store = store
        self.prefix = prefix

    def __getitem__(self, key: str) -> Tensor:
        return self.store[f"{self.prefix}.{key}"]

    def __contains__(self, key: str) -> bool:
        return f"{self.prefix}.{key}" in self.store

    def sub(self, key: str) -> "ParamView":
        return ParamView(self.store, f"{self.prefix}.{key}")
