"""Parallel FFN adapters and the per-task mixture-of-adapters router.

An adapter is the bias-free bottleneck ``H(X) = relu(X W_d) W_u`` added next
to a frozen FFN. With several adapters, each task type ``t`` owns one gate
vector per adapter and the layer output becomes

    O^t = F(X) + sum_k G[t, k] * H_k(X)

where ``G[t, k]`` has the model width and scales features elementwise.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .params import ParamStore
from .tensor import InvalidShapeError, Rng, Tensor


class TaskType(enum.IntEnum):
    IMAGE_LEVEL = 0
    REGION_LEVEL = 1

    @property
    def label(self) -> str:
        return self.name.lower()

    @classmethod
    def parse(cls, value) -> "TaskType":
        if isinstance(value, cls):
            return value
        if isinstance(value, str):
            return cls[value.upper()]
        return cls(int(value))


# adapter index of each task's "home" adapter in the default two-adapter setup
IMAGE_ADAPTER = 0
REGION_ADAPTER = 1


@dataclass
class Adapter:
    w_down: Tensor  # [D, r]
    w_up: Tensor  # [r, D]

    def __post_init__(self):
        d, r = self.w_down.shape
        if self.w_up.shape != (r, d):
            raise InvalidShapeError(
                f"adapter: W_u shape {self.w_up.shape} does not match W_d {self.w_down.shape}"
            )


def init_adapter(store: ParamStore, prefix: str, d: int, r: int, group: str, rng: Rng,
                 std: float = 0.02) -> Adapter:
    """``W_d ~ N(0, std)``, ``W_u = 0`` so a fresh adapter is an exact no-op."""
    if r < 1:
        raise ValueError("adapter rank must be >= 1")
    w_down = store.normal(f"{prefix}.w_down", (d, r), group, rng, std)
    w_up = store.zeros(f"{prefix}.w_up", (r, d), group)
    return Adapter(w_down, w_up)


def adapter_forward(x: Tensor, a: Adapter) -> Tensor:
    if x.shape[-1] != a.w_down.shape[0]:
        raise InvalidShapeError(
            f"adapter: input width {x.shape[-1]} != {a.w_down.shape[0]}"
        )
    return T.matmul(T.relu(T.matmul(x, a.w_down)), a.w_up)


def adapter_residual(ffn_out: Tensor, adapter_out: Tensor) -> Tensor:
    if ffn_out.shape != adapter_out.shape:
        raise InvalidShapeError(f"adapter_residual: {ffn_out.shape} vs {adapter_out.shape}")
    return T.add(ffn_out, adapter_out)


def init_gates(k: int, d: int) -> np.ndarray:
    """Task-identity gates: each task starts fully on its own adapter.

    Shape ``[2, k, d]``. Task ``t`` gets ones on adapter ``t`` and zeros
    elsewhere; adapters beyond the second start at zero for both tasks.
    """
    g = np.zeros((len(TaskType), k, d))
    for t in TaskType:
        if t < k:
            g[t, t, :] = 1.0
    return g


def router_forward(ffn_out: Tensor, adapter_outs: list[Tensor], gates: Tensor,
                   t: TaskType) -> Tensor:
    k = len(adapter_outs)
    if k < 1:
        raise ValueError("router needs at least one adapter")
    if gates.ndim != 3 or gates.shape[1] != k:
        raise InvalidShapeError(
            f"router: gates {gates.shape} do not match {k} adapter outputs"
        )
    if gates.shape[2] != ffn_out.shape[-1]:
        raise InvalidShapeError("router: gate width differs from model width")
    t = TaskType.parse(t)
    out = ffn_out
    for i, h in enumerate(adapter_outs):
        if h.shape != ffn_out.shape:
            raise InvalidShapeError(f"router: adapter output {h.shape} vs {ffn_out.shape}")
        out = T.add(out, T.mul(h, T.index(gates, (int(t), i))))
    return out
