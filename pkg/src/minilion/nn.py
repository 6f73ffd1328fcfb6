"""Transformer building blocks over a :class:`ParamStore`.

Every block is a pure function of ``(inputs, params)``; parameters are read
through a :class:`ParamView` so the same code serves the vision encoder, the
query bridge, the aggregator and the language model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

from . import tensor as T
from .params import ParamStore, ParamView
from .tensor import ContractError, InvalidShapeError, Rng, Tensor

LN_EPS = 1e-5


@dataclass(frozen=True)
class AttentionConfig:
    d_model: int
    n_heads: int
    causal: bool = False

    def __post_init__(self):
        if self.n_heads < 1 or self.d_model % self.n_heads:
            raise InvalidShapeError(
                f"d_model={self.d_model} must be divisible by n_heads={self.n_heads}"
            )


@dataclass(frozen=True)
class FfnConfig:
    d_model: int
    d_hidden: int
    activation: str = "gelu"

    def __post_init__(self):
        if self.d_hidden < 1:
            raise ValueError("d_hidden must be >= 1")
        if self.activation not in ("relu", "gelu"):
            raise ValueError(f"unknown activation {self.activation!r}")


@dataclass(frozen=True)
class BlockConfig:
    """One transformer layer.

    ``norm="pre"`` wraps each sub-layer as ``x + f(LN(x))``; ``norm="post"``
    is the Bert form ``LN(x + f(x))``. ``residual=False`` drops the skip
    connections so the block is the bare composition FFN(XAttn(Attn(X), Y))
    (pre-norm inputs are kept).
    """

    d_model: int
    n_heads: int
    d_hidden: int
    activation: str = "gelu"
    causal: bool = False
    cross: bool = False
    norm: str = "pre"
    residual: bool = True

    def __post_init__(self):
        if self.norm not in ("pre", "post"):
            raise ValueError(f"unknown norm placement {self.norm!r}")
        if self.causal and self.cross:
            raise ContractError("causal blocks cannot carry cross-attention")

    @property
    def self_attn(self) -> AttentionConfig:
        return AttentionConfig(self.d_model, self.n_heads, self.causal)

    @property
    def cross_attn(self) -> AttentionConfig:
        return AttentionConfig(self.d_model, self.n_heads, False)

    @property
    def ffn(self) -> FfnConfig:
        return FfnConfig(self.d_model, self.d_hidden, self.activation)

    def with_(self, **kw) -> "BlockConfig":
        return replace(self, **kw)


# ---------------------------------------------------------------------------
# parameter initialisation


def init_linear(store: ParamStore, prefix: str, d_in: int, d_out: int, group: str,
                rng: Rng, std: float = 0.02, bias: bool = True) -> None:
    store.normal(f"{prefix}.w", (d_in, d_out), group, rng, std)
    if bias:
        store.zeros(f"{prefix}.b", (d_out,), group)


def init_layernorm(store: ParamStore, prefix: str, d: int, group: str) -> None:
    store.ones(f"{prefix}.g", (d,), group)
    store.zeros(f"{prefix}.b", (d,), group)


def init_attention(store, prefix, cfg: AttentionConfig, group, rng, std=0.02) -> None:
    for name in ("q", "k", "v", "o"):
        init_linear(store, f"{prefix}.{name}", cfg.d_model, cfg.d_model, group, rng, std)


def init_ffn(store, prefix, cfg: FfnConfig, group, rng, std=0.02) -> None:
    init_linear(store, f"{prefix}.fc1", cfg.d_model, cfg.d_hidden, group, rng, std)
    init_linear(store, f"{prefix}.fc2", cfg.d_hidden, cfg.d_model, group, rng, std)


def init_block(store, prefix, cfg: BlockConfig, group, rng, std=0.02) -> None:
    init_layernorm(store, f"{prefix}.ln1", cfg.d_model, group)
    init_attention(store, f"{prefix}.attn", cfg.self_attn, group, rng, std)
    if cfg.cross:
        init_layernorm(store, f"{prefix}.ln2", cfg.d_model, group)
        init_layernorm(store, f"{prefix}.ln_kv", cfg.d_model, group)
        init_attention(store, f"{prefix}.xattn", cfg.cross_attn, group, rng, std)
    init_layernorm(store, f"{prefix}.ln3", cfg.d_model, group)
    init_ffn(store, f"{prefix}.ffn", cfg.ffn, group, rng, std)


# ---------------------------------------------------------------------------
# forward


def linear(x: Tensor, p: ParamView) -> Tensor:
    y = T.matmul(x, p["w"])
    return T.add(y, p["b"]) if "b" in p else y


def layer_norm(x: Tensor, p: ParamView) -> Tensor:
    return T.layernorm(x, p["g"], p["b"], LN_EPS)


def attention(x: Tensor, kv: Tensor | None, cfg: AttentionConfig, p: ParamView) -> Tensor:
    """Multi-head attention. ``kv=None`` means self-attention over ``x``."""
    if x.ndim != 3 or x.shape[-1] != cfg.d_model:
        raise InvalidShapeError(f"attention: expected [B, L, {cfg.d_model}], got {x.shape}")
    if kv is not None:
        if cfg.causal:
            raise ContractError("causal attention takes no external keys/values")
        if kv.ndim != 3 or kv.shape[0] != x.shape[0] or kv.shape[-1] != x.shape[-1]:
            raise InvalidShapeError(f"attention: kv shape {kv.shape} vs x shape {x.shape}")
    src = x if kv is None else kv
    b, l, d = x.shape
    m = src.shape[1]
    h = cfg.n_heads
    dh = d // h

    def heads(t: Tensor, n: int) -> Tensor:
        return T.transpose(T.reshape(t, (b, n, h, dh)), (0, 2, 1, 3))

    q = heads(linear(x, p.sub("q")), l)
    k = heads(linear(src, p.sub("k")), m)
    v = heads(linear(src, p.sub("v")), m)
    scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2)))
    w = T.attention_softmax(scores, 1.0 / math.sqrt(dh), cfg.causal)
    out = T.reshape(T.transpose(T.matmul(w, v), (0, 2, 1, 3)), (b, l, d))
    return linear(out, p.sub("o"))


def ffn(x: Tensor, cfg: FfnConfig, p: ParamView) -> Tensor:
    if x.shape[-1] != cfg.d_model:
        raise InvalidShapeError(f"ffn: last dim {x.shape[-1]} != d_model {cfg.d_model}")
    hidden = linear(x, p.sub("fc1"))
    hidden = T.relu(hidden) if cfg.activation == "relu" else T.gelu(hidden)
    return linear(hidden, p.sub("fc2"))


def bert_block(x: Tensor, y: Tensor | None, cfg: BlockConfig, p: ParamView) -> Tensor:
    """Self-attention, then cross-attention onto ``y``, then FFN."""
    if cfg.cross and y is None:
        raise ContractError("cross-attention block called without y")
    if not cfg.cross and y is not None:
        raise ContractError("block has no cross-attention but y was given")

    if cfg.norm == "post":
        h = x
        a = attention(h, None, cfg.self_attn, p.sub("attn"))
        h = layer_norm(T.add(h, a) if cfg.residual else a, p.sub("ln1"))
        if cfg.cross:
            c = attention(h, y, cfg.cross_attn, p.sub("xattn"))
            h = layer_norm(T.add(h, c) if cfg.residual else c, p.sub("ln2"))
        f = ffn(h, cfg.ffn, p.sub("ffn"))
        return layer_norm(T.add(h, f) if cfg.residual else f, p.sub("ln3"))

    h = x
    a = attention(layer_norm(h, p.sub("ln1")), None, cfg.self_attn, p.sub("attn"))
    h = T.add(h, a) if cfg.residual else a
    if cfg.cross:
        c = attention(layer_norm(h, p.sub("ln2")), layer_norm(y, p.sub("ln_kv")),
                      cfg.cross_attn, p.sub("xattn"))
        h = T.add(h, c) if cfg.residual else c
    f = ffn(layer_norm(h, p.sub("ln3")), cfg.ffn, p.sub("ffn"))
    return T.add(h, f) if cfg.residual else f
