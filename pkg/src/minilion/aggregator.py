"""Multi-level vision aggregator.

Two cross-attention blocks fuse three hidden layers of the vision encoder:
the deepest tap is the query stream, the middle tap is attended first and
the shallow tap second.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import nn
from .params import ParamStore, ParamView
from .tensor import InvalidShapeError, Rng, Tensor


class EncoderTooShallowError(ValueError):
    pass


@dataclass(frozen=True)
class TapSelection:
    i: int
    j: int
    k: int

    def __post_init__(self):
        if not 0 <= self.k < self.j < self.i:
            raise ValueError(f"taps must satisfy 0 <= k < j < i, got {self}")

    def as_tuple(self) -> tuple[int, int, int]:
        return (self.i, self.j, self.k)


def select_taps(num_layers: int) -> TapSelection:
    """Deepest layer, plus the layers at 2/3 and 1/3 depth (floored)."""
    if num_layers < 6:
        raise EncoderTooShallowError(
            f"vision encoder has {num_layers} layers; the aggregator needs at least 6"
        )
    return TapSelection(num_layers - 1, (2 * num_layers) // 3, num_layers // 3)


@dataclass(frozen=True)
class AggregatorConfig:
    d_model: int
    n_heads: int
    d_hidden: int
    norm: str = "pre"
    residual: bool = True
    input_proj: bool = False

    @property
    def block(self) -> nn.BlockConfig:
        return nn.BlockConfig(self.d_model, self.n_heads, self.d_hidden, "gelu",
                              causal=False, cross=True, norm=self.norm,
                              residual=self.residual)


def init_aggregator(store: ParamStore, prefix: str, cfg: AggregatorConfig, rng: Rng,
                    group: str = "aggregator") -> None:
    if cfg.input_proj:
        for tap in ("tap_i", "tap_j", "tap_k"):
            nn.init_linear(store, f"{prefix}.{tap}", cfg.d_model, cfg.d_model, group, rng)
    nn.init_block(store, f"{prefix}.block1", cfg.block, group, rng)
    nn.init_block(store, f"{prefix}.block2", cfg.block, group, rng)


def aggregate(v_i: Tensor, v_j: Tensor, v_k: Tensor, cfg: AggregatorConfig,
              p: ParamView) -> Tensor:
    if not v_i.shape == v_j.shape == v_k.shape:
        raise InvalidShapeError(
            f"aggregate: taps differ in shape {v_i.shape}, {v_j.shape}, {v_k.shape}"
        )
    if cfg.input_proj:
        v_i = nn.linear(v_i, p.sub("tap_i"))
        v_j = nn.linear(v_j, p.sub("tap_j"))
        v_k = nn.linear(v_k, p.sub("tap_k"))
    h = nn.bert_block(v_i, v_j, cfg.block, p.sub("block1"))
    return nn.bert_block(h, v_k, cfg.block, p.sub("block2"))
