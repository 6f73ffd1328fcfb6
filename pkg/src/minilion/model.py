"""Toy multimodal LM with a query bridge, a vision aggregator and
mixture-of-adapters inside a frozen causal decoder.

Input layout fed to the decoder::

    [bridge tokens | aggregator tokens | text tokens]

Image-level tasks omit the aggregator tokens by default (see
``ModelConfig.va_for_image``), so stage-1 behaviour is reproduced exactly
when stage 3 starts.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import nn
from . import tensor as T
from .aggregator import AggregatorConfig, aggregate, init_aggregator, select_taps
from .data.scenes import (
    InstructionSample,
    gen_scene,
    scene_features,
    scene_grid,
    scene_objects_text,
)
from .data.templates import render_tag_instruction, with_tags
from .data.tokenizer import BOS, EOS, HINT, PAD, Tokenizer
from .moa import Adapter, TaskType, init_adapter, init_gates, router_forward, adapter_forward
from .params import ParamStore
from .tensor import ContractError, Rng, Tensor

IGNORE = -100
HARD_HINT = "the tags"
ROUTING_MODES = ("task", "shared", "sum")
# adapter k serves task k
ADAPTER_GROUPS = ("adapter_img", "adapter_reg")


@dataclass
class ModelConfig:
    d_model: int = 64
    vision_layers: int = 6
    lm_layers: int = 2
    n_heads: int = 2
    n_queries: int = 4
    vocab_size: int = Tokenizer().vocab_size
    adapter_dim: int = 8
    n_adapters: int = 2
    max_len: int = 320
    lm_hidden: int = 128
    grid: int = 4
    feature_noise: float = 0.1
    # gates per LM layer unless shared
    shared_gates: bool = False
    # "task": per-task router; "shared": one adapter for every task;
    # "sum": all adapters added with unit weight, no router
    routing: str = "task"
    va_for_image: bool = False
    soft_prompt: bool = True
    n_soft: int = 1
    agg_norm: str = "pre"
    agg_residual: bool = True
    agg_input_proj: bool = False
    init_std: float = 0.02
    vision_pos_std: float = 0.5

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.vocab_size <= HINT:
            raise ValueError("vocab must hold the reserved PAD/BOS/EOS/HINT ids")
        if self.n_adapters != len(ADAPTER_GROUPS):
            raise ValueError("the model wires exactly one adapter per task type")
        if self.routing not in ROUTING_MODES:
            raise ValueError(f"routing must be one of {ROUTING_MODES}")

    @property
    def n_patches(self) -> int:
        return self.grid * self.grid

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class Batch:
    """Token ids and labels for one task type, right-padded."""

    task: TaskType
    features: np.ndarray  # [B, N, D]
    ids: np.ndarray  # [B, S]
    labels: np.ndarray  # [B, S], IGNORE outside target positions
    lengths: np.ndarray  # [B] prompt (+ target) lengths
    prompt_lengths: np.ndarray = field(default=None)
    samples: tuple = ()

    @property
    def n_targets(self) -> int:
        return int((self.labels != IGNORE).sum())


class LionModel:
    def __init__(self, cfg: ModelConfig, params: ParamStore | None = None, seed: int = 0,
                 tokenizer: Tokenizer | None = None):
        self.cfg = cfg
        self.tok = tokenizer or Tokenizer()
        if self.tok.vocab_size != cfg.vocab_size:
            raise ValueError("tokenizer and config disagree on vocab size")
        self.taps = select_taps(cfg.vision_layers)
        self.params = params if params is not None else self._init_params(Rng(seed))
        self._vision_cache: dict[int, np.ndarray] = {}
        self._vision_key: bytes | None = None

    # -- configs ---------------------------------------------------------

    @property
    def vision_block(self) -> nn.BlockConfig:
        c = self.cfg
        return nn.BlockConfig(c.d_model, c.n_heads, 2 * c.d_model)

    @property
    def bridge_block(self) -> nn.BlockConfig:
        c = self.cfg
        return nn.BlockConfig(c.d_model, c.n_heads, 2 * c.d_model, cross=True)

    @property
    def agg_cfg(self) -> AggregatorConfig:
        c = self.cfg
        return AggregatorConfig(c.d_model, c.n_heads, 2 * c.d_model, c.agg_norm,
                                c.agg_residual, c.agg_input_proj)

    @property
    def lm_attn(self) -> nn.AttentionConfig:
        return nn.AttentionConfig(self.cfg.d_model, self.cfg.n_heads, causal=True)

    @property
    def lm_ffn(self) -> nn.FfnConfig:
        return nn.FfnConfig(self.cfg.d_model, self.cfg.lm_hidden, "gelu")

    # -- parameters ------------------------------------------------------

    def _init_params(self, rng: Rng) -> ParamStore:
        c = self.cfg
        d, std = c.d_model, c.init_std
        s = ParamStore()
        # row code + column code, so patch geometry is linearly readable
        rows = rng.normal(c.grid * d).reshape(c.grid, 1, d)
        cols = rng.normal(c.grid * d).reshape(1, c.grid, d)
        pos = (rows + cols).reshape(c.n_patches, d) * c.vision_pos_std
        s.add("vision.pos", pos, "vision_encoder")
        for i in range(c.vision_layers):
            nn.init_block(s, f"vision.layer{i}", self.vision_block, "vision_encoder", rng, std)

        s.normal("bridge.queries", (c.n_queries, d), "bridge", rng, 1.0)
        nn.init_block(s, "bridge.block", self.bridge_block, "bridge", rng, std)
        nn.init_linear(s, "bridge.proj", d, d, "bridge", rng, std)

        init_aggregator(s, "agg", self.agg_cfg, rng)
        nn.init_linear(s, "mlp.fc1", d, 2 * d, "mlp_proj", rng, std)
        nn.init_linear(s, "mlp.fc2", 2 * d, d, "mlp_proj", rng, std)

        s.normal("lm.tok", (c.vocab_size, d), "embeddings", rng, std)
        s.normal("lm.pos", (c.max_len, d), "embeddings", rng, std)
        for i in range(c.lm_layers):
            pre = f"lm.layer{i}"
            nn.init_layernorm(s, f"{pre}.ln1", d, "lm_base")
            nn.init_attention(s, f"{pre}.attn", self.lm_attn, "lm_base", rng, std)
            nn.init_layernorm(s, f"{pre}.ln2", d, "lm_base")
            nn.init_ffn(s, f"{pre}.ffn", self.lm_ffn, "lm_base", rng, std)
        nn.init_layernorm(s, "lm.ln_f", d, "lm_base")
        nn.init_linear(s, "lm.head", d, c.vocab_size, "lm_base", rng, std)

        for i in range(c.lm_layers):
            for group in ADAPTER_GROUPS:
                init_adapter(s, f"{group}.layer{i}", d, c.adapter_dim, group, rng, std)
        gates = init_gates(c.n_adapters, d)
        if c.shared_gates:
            s.add("gates.shared", gates, "gates")
        else:
            for i in range(c.lm_layers):
                s.add(f"gates.layer{i}", gates, "gates")
        if c.soft_prompt:
            s.normal("soft_prompt", (c.n_soft, d), "soft_prompt", rng, std)
        return s

    def adapters(self, layer: int) -> list[Adapter]:
        return [
            Adapter(self.params[f"{g}.layer{layer}.w_down"], self.params[f"{g}.layer{layer}.w_up"])
            for g in ADAPTER_GROUPS
        ]

    def gates(self, layer: int) -> Tensor:
        if self.cfg.routing == "sum":
            return Tensor(np.ones((len(TaskType), self.cfg.n_adapters, self.cfg.d_model)))
        key = "gates.shared" if self.cfg.shared_gates else f"gates.layer{layer}"
        return self.params[key]

    # -- vision side -----------------------------------------------------

    def encode_image(self, features) -> list[Tensor]:
        """Hidden state after every vision layer."""
        x = features if isinstance(features, Tensor) else Tensor(features)
        x = T.add(x, self.params["vision.pos"])
        hidden = []
        for i in range(self.cfg.vision_layers):
            x = nn.bert_block(x, None, self.vision_block, self.params.view(f"vision.layer{i}"))
            hidden.append(x)
        return hidden

    def bridge_forward(self, top_hidden: Tensor) -> Tensor:
        b = top_hidden.shape[0]
        q = T.add(T.zeros((b, self.cfg.n_queries, self.cfg.d_model)), self.params["bridge.queries"])
        h = nn.bert_block(q, top_hidden, self.bridge_block, self.params.view("bridge.block"))
        return nn.linear(h, self.params.view("bridge.proj"))

    def aggregate(self, hidden: Sequence[Tensor]) -> Tensor:
        i, j, k = self.taps.as_tuple()
        return aggregate(hidden[i], hidden[j], hidden[k], self.agg_cfg, self.params.view("agg"))

    def project_va(self, v_bar: Tensor) -> Tensor:
        h = T.gelu(nn.linear(v_bar, self.params.view("mlp.fc1")))
        return nn.linear(h, self.params.view("mlp.fc2"))

    def _vision_fingerprint(self) -> bytes | None:
        """Hash of the vision weights, or None while any of them trains."""
        h = hashlib.blake2b(digest_size=16)
        for name in self.params.names_in("vision_encoder"):
            t = self.params[name]
            if t.requires_grad:
                return None
            h.update(t.data.tobytes())
        return h.digest()

    def vision_hidden(self, samples: Sequence[InstructionSample],
                      features: np.ndarray | None = None) -> list[Tensor]:
        """Per-layer vision states for a batch of samples.

        The encoder is frozen and a scene's features depend only on its
        seed, so states are cached per scene until the weights change.
        """
        key = self._vision_fingerprint() if samples else None
        if key is None:
            return self.encode_image(self.features(samples) if features is None else features)
        if key != self._vision_key:
            self._vision_cache.clear()
            self._vision_key = key
        todo = sorted({s.scene_seed for s in samples} - self._vision_cache.keys())
        if todo:
            feats = np.stack([self.scene_features(seed) for seed in todo])
            with T.no_grad():
                hidden = np.stack([h.data for h in self.encode_image(feats)], axis=1)
            for seed, h in zip(todo, hidden):
                self._vision_cache[seed] = h
        stacked = np.stack([self._vision_cache[s.scene_seed] for s in samples])
        return [Tensor(stacked[:, i]) for i in range(self.cfg.vision_layers)]

    def visual_tokens(self, hidden: list[Tensor], task: TaskType) -> tuple[Tensor, Tensor | None]:
        bridge = self.bridge_forward(hidden[-1])
        if task == TaskType.IMAGE_LEVEL and not self.cfg.va_for_image:
            return bridge, None
        return bridge, self.project_va(self.aggregate(hidden))

    # -- language side ---------------------------------------------------

    def assemble_inputs(self, bridge_tokens: Tensor, va_tokens: Tensor | None,
                        text_ids: np.ndarray) -> Tensor:
        """Concatenate ``[bridge, va, text]``; HINT ids take the soft prompt."""
        text_ids = np.asarray(text_ids, dtype=np.int64)
        emb = T.embed(self.params["lm.tok"], text_ids)
        hint = text_ids == HINT
        if hint.any():
            if not self.cfg.soft_prompt or "soft_prompt" not in self.params:
                raise ContractError("instruction holds a hint token but no soft prompt is configured")
            emb = self._substitute_hints(emb, hint)
        parts = [bridge_tokens] + ([va_tokens] if va_tokens is not None else []) + [emb]
        return T.concat(parts, axis=1)

    def _substitute_hints(self, emb: Tensor, hint: np.ndarray) -> Tensor:
        soft = self.params["soft_prompt"]
        n_soft = soft.shape[0]
        # k-th hint of a consecutive run takes soft vector k mod n_soft
        slot = np.zeros(hint.shape, dtype=np.int64)
        run = np.zeros(hint.shape[0], dtype=np.int64)
        for j in range(hint.shape[1]):
            slot[:, j] = run % n_soft
            run = np.where(hint[:, j], run + 1, 0)
        keep = np.repeat((~hint)[..., None].astype(np.float64), emb.shape[-1], axis=-1)
        out = T.mul(emb, Tensor(keep))
        for k in range(n_soft):
            m = (hint & (slot == k))[..., None].astype(np.float64)
            if m.any():
                mask = Tensor(np.repeat(m, emb.shape[-1], axis=-1))
                out = T.add(out, T.mul(mask, T.index(soft, k)))
        return out

    def lm_forward(self, x: Tensor, task: TaskType) -> Tensor:
        c = self.cfg
        seq = x.shape[1]
        if seq > c.max_len:
            raise ContractError(f"sequence of {seq} positions exceeds max_len={c.max_len}")
        x = T.add(x, T.index(self.params["lm.pos"], slice(0, seq)))
        route = TaskType.IMAGE_LEVEL if c.routing == "shared" else task
        for i in range(c.lm_layers):
            p = self.params.view(f"lm.layer{i}")
            x = T.add(x, nn.attention(nn.layer_norm(x, p.sub("ln1")), None, self.lm_attn, p.sub("attn")))
            h = nn.layer_norm(x, p.sub("ln2"))
            f = nn.ffn(h, self.lm_ffn, p.sub("ffn"))
            outs = [adapter_forward(h, a) for a in self.adapters(i)]
            x = T.add(x, router_forward(f, outs, self.gates(i), route))
        x = nn.layer_norm(x, self.params.view("lm.ln_f"))
        return nn.linear(x, self.params.view("lm.head"))

    # -- samples -> batches ----------------------------------------------

    def prompt_text(self, sample: InstructionSample, tags: str | None = None) -> str:
        """Instruction, optionally led by the tag sentence (``tags`` is
        ``"soft"`` for the hint slot or ``"hard"`` for plain text)."""
        text = sample.instruction
        if tags is not None and sample.tags is not None:
            hint = HARD_HINT if tags == "hard" else None
            sentence = (render_tag_instruction(sample.tags, hint=hint) if hint
                        else render_tag_instruction(sample.tags))
            text = with_tags(text, sentence)
        return text

    def prompt_ids(self, sample: InstructionSample, tags: str | None = None) -> list[int]:
        return [BOS] + self.tok.encode(self.prompt_text(sample, tags) + " ")

    def scene_features(self, seed: int) -> np.ndarray:
        return scene_features(gen_scene(seed, self.cfg.grid), self.cfg.d_model,
                              self.cfg.feature_noise)

    def features(self, samples: Sequence[InstructionSample]) -> np.ndarray:
        return np.stack([self.scene_features(s.scene_seed) for s in samples])

    def make_batch(self, samples: Sequence[InstructionSample], tags: str | None = None,
                   targets: Sequence[str] | None = None) -> Batch:
        if not samples:
            raise ValueError("empty batch")
        task = samples[0].task
        if any(s.task != task for s in samples):
            raise ContractError("a batch must hold a single task type")
        rows, labels, plens = [], [], []
        for i, s in enumerate(samples):
            target = s.target if targets is None else targets[i]
            if not target:
                raise T.UndefinedLossError("empty target")
            p = self.prompt_ids(s, tags)
            t = self.tok.encode(target) + [EOS]
            ids = p + t
            lab = [IGNORE] * len(ids)
            # position j predicts token j+1
            for j in range(len(p) - 1, len(ids) - 1):
                lab[j] = ids[j + 1]
            rows.append(ids)
            labels.append(lab)
            plens.append(len(p))
        width = max(len(r) for r in rows)
        ids = np.full((len(rows), width), PAD, dtype=np.int64)
        lab = np.full((len(rows), width), IGNORE, dtype=np.int64)
        for i, (r, l) in enumerate(zip(rows, labels)):
            ids[i, :len(r)] = r
            lab[i, :len(l)] = l
        return Batch(task, self.features(samples), ids, lab,
                     np.array([len(r) for r in rows]), np.array(plens),
                     tuple(samples))

    def n_visual(self, task: TaskType) -> int:
        n = self.cfg.n_queries
        if task == TaskType.REGION_LEVEL or self.cfg.va_for_image:
            n += self.cfg.n_patches
        return n

    def batch_loss(self, batch: Batch, task: TaskType | None = None) -> Tensor:
        """Mean target-token cross-entropy. ``task`` overrides routing only."""
        if batch.n_targets == 0:
            raise T.UndefinedLossError("batch has no target tokens")
        route = batch.task if task is None else TaskType.parse(task)
        bridge, va = self.visual_tokens(self.vision_hidden(batch.samples, batch.features),
                                        batch.task)
        x = self.assemble_inputs(bridge, va, batch.ids)
        logits = self.lm_forward(x, route)
        nv = self.n_visual(batch.task)
        labels = np.concatenate(
            [np.full((batch.ids.shape[0], nv), IGNORE, dtype=np.int64), batch.labels], axis=1)
        return T.cross_entropy(logits, labels, IGNORE)

    def scene_text_ids(self, samples: Sequence[InstructionSample], task: TaskType) -> np.ndarray:
        """Character ids standing in for the visual slots, [B, slots, width]:
        the object codes in the bridge slots, the drawn grid in the patch
        slots."""
        rows = []
        for s in samples:
            scene = gen_scene(s.scene_seed, self.cfg.grid)
            codes = scene_objects_text(scene, self.cfg.n_queries)
            if self.n_visual(task) > self.cfg.n_queries:
                codes += scene_grid(scene)
            rows.append([self.tok.encode(c) for c in codes])
        return np.array(rows, dtype=np.int64)

    def scene_text_embed(self, samples: Sequence[InstructionSample], task: TaskType) -> Tensor:
        """Each slot's code as the sum of its character embeddings."""
        ids = self.scene_text_ids(samples, task)
        table = self.params["lm.tok"]
        out = T.embed(table, ids[..., 0])
        for j in range(1, ids.shape[-1]):
            out = out + T.embed(table, ids[..., j])
        return out

    def text_loss(self, samples: Sequence[InstructionSample], tags: str | None = None,
                  return_count: bool = False, scene_text: bool = False,
                  targets_only: bool = False):
        """Plain language-modelling loss over the whole text of each sample.

        The visual slots are kept so text positions line up with the
        multimodal layout. They hold zero vectors, or with ``scene_text``
        the summed embeddings of a short code per slot drawing the
        scene as text. ``targets_only`` scores the response tokens alone.
        """
        batch = self.make_batch(samples, tags)
        b = batch.ids.shape[0]
        nv = self.n_visual(batch.task)
        if scene_text:
            prefix = self.scene_text_embed(samples, batch.task)
        else:
            prefix = T.zeros((b, nv, self.cfg.d_model))
        emb = self.assemble_inputs(prefix, None, batch.ids)
        logits = self.lm_forward(emb, batch.task)
        if targets_only:
            nxt = batch.labels
        else:
            nxt = np.full(batch.ids.shape, IGNORE, dtype=np.int64)
            nxt[:, :-1] = batch.ids[:, 1:]
            nxt[batch.ids == PAD] = IGNORE
            nxt[:, :-1][batch.ids[:, 1:] == PAD] = IGNORE
        labels = np.concatenate([np.full((b, nv), IGNORE, dtype=np.int64), nxt], axis=1)
        loss = T.cross_entropy(logits, labels, IGNORE)
        return (loss, int((nxt != IGNORE).sum())) if return_count else loss

    def forward_loss(self, samples, task: TaskType | None = None, tags: str | None = None) -> Tensor:
        if isinstance(samples, InstructionSample):
            samples = [samples]
        return self.batch_loss(self.make_batch(samples, tags), task)

    # -- inference -------------------------------------------------------

    def greedy_decode(self, samples: Sequence[InstructionSample], max_new: int = 32,
                      tags: str | None = None, task: TaskType | None = None) -> list[list[int]]:
        """Argmax decoding, batched; each row stops at EOS or ``max_new``.

        Returned ids include the EOS when one was produced. PAD, BOS and
        HINT are never emitted.
        """
        if max_new < 1:
            raise ValueError("max_new must be >= 1")
        if isinstance(samples, InstructionSample):
            samples = [samples]
        btask = samples[0].task
        route = btask if task is None else TaskType.parse(task)
        prompts = [self.prompt_ids(s, tags) for s in samples]
        b = len(prompts)
        lengths = np.array([len(p) for p in prompts])
        ids = np.full((b, int(lengths.max()) + max_new), PAD, dtype=np.int64)
        for i, p in enumerate(prompts):
            ids[i, :len(p)] = p
        out: list[list[int]] = [[] for _ in range(b)]
        done = np.zeros(b, dtype=bool)
        nv = self.n_visual(btask)
        with T.no_grad():
            bridge, va = self.visual_tokens(self.vision_hidden(samples), btask)
            for _ in range(max_new):
                width = int(lengths.max())
                x = self.assemble_inputs(bridge, va, ids[:, :width])
                logits = self.lm_forward(x, route).data
                # reserved ids other than EOS are never generated
                logits[..., [PAD, BOS, HINT]] = -np.inf
                for i in range(b):
                    if done[i]:
                        continue
                    nxt = int(np.argmax(logits[i, nv + lengths[i] - 1]))
                    out[i].append(nxt)
                    ids[i, lengths[i]] = nxt
                    lengths[i] += 1
                    if nxt == EOS:
                        done[i] = True
                if done.all():
                    break
        return out

    def decode_text(self, ids: Sequence[int]) -> str:
        ids = list(ids)
        if EOS in ids:
            ids = ids[:ids.index(EOS)]
        return self.tok.decode(ids)

    def score_candidates(self, sample: InstructionSample, candidates: Sequence[str],
                         tags: str | None = None, task: TaskType | None = None) -> list[float]:
        """Teacher-forced log-likelihood of each candidate (its EOS included)."""
        if not candidates:
            raise ValueError("no candidates to score")
        if any(not c for c in candidates):
            raise ContractError("empty candidate string")
        batch = self.make_batch([sample] * len(candidates), tags, targets=list(candidates))
        route = batch.task if task is None else TaskType.parse(task)
        with T.no_grad():
            bridge, va = self.visual_tokens(self.vision_hidden([sample]), batch.task)
            bridge = T.concat([bridge] * len(candidates), axis=0)
            if va is not None:
                va = T.concat([va] * len(candidates), axis=0)
            logits = self.lm_forward(self.assemble_inputs(bridge, va, batch.ids), route).data
        nv = self.n_visual(batch.task)
        logp = T.log_softmax_np(logits[:, nv:, :])
        scores = []
        for i in range(len(candidates)):
            pos = np.nonzero(batch.labels[i] != IGNORE)[0]
            scores.append(float(logp[i, pos, batch.labels[i, pos]].sum()))
        return scores
