"""Stage-wise instruction tuning.

Stages and what they train:

============  ==============================================
bootstrap     lm_base, embeddings (text only, then frozen)
s1            bridge, adapter_img
s2            aggregator, mlp_proj, adapter_reg
s3            adapter_img, adapter_reg, gates, soft_prompt
single        union of s1, s2 and s3
============  ==============================================

Batches are drawn from per-task streams by a counter-based shuffle, so the
batch at step ``k`` depends only on ``(seed, stage, k)`` and a run can be
resumed from any step.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .data.scenes import InstructionSample
from .model import LionModel
from .moa import TaskType
from .params import ParamStore
from .tensor import Rng

STAGES = ("bootstrap", "s1", "s2", "s3", "single")
WARMUP_FLOOR = 1e-8

_TRAINABLE = {
    "bootstrap": frozenset({"lm_base", "embeddings"}),
    "s1": frozenset({"bridge", "adapter_img"}),
    "s2": frozenset({"aggregator", "mlp_proj", "adapter_reg"}),
    "s3": frozenset({"adapter_img", "adapter_reg", "gates", "soft_prompt"}),
}
_TRAINABLE["single"] = _TRAINABLE["s1"] | _TRAINABLE["s2"] | _TRAINABLE["s3"]

PREREQUISITE = {"s2": "s1", "s3": "s2"}
STAGE_TASKS = {
    "bootstrap": (TaskType.IMAGE_LEVEL, TaskType.REGION_LEVEL),
    "s1": (TaskType.IMAGE_LEVEL,),
    "s2": (TaskType.REGION_LEVEL,),
    "s3": (TaskType.IMAGE_LEVEL, TaskType.REGION_LEVEL),
    "single": (TaskType.IMAGE_LEVEL, TaskType.REGION_LEVEL),
}
DEFAULT_STEPS = {"bootstrap": 1500, "s1": 300, "s2": 600, "s3": 600, "single": 1500}


class DivergenceError(RuntimeError):
    def __init__(self, step: int, detail: str):
        super().__init__(f"training diverged at step {step}: {detail}")
        self.step = step


class MissingPrerequisiteError(RuntimeError):
    pass


class StreamMismatchError(ValueError):
    pass


def _check_stage(stage: str) -> str:
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}; expected one of {STAGES}")
    return stage


def trainable_set(stage: str, train_bridge_in_s3: bool = False) -> frozenset[str]:
    groups = _TRAINABLE[_check_stage(stage)]
    if stage == "s3" and train_bridge_in_s3:
        groups = groups | {"bridge"}
    return groups


@dataclass
class StageConfig:
    stage: str
    steps: int = 300
    batch_size: int = 16
    lr_init: float = 1e-3
    lr_min: float = 1e-5
    warmup_steps: int = 30
    # groups listed here train at a constant lr instead of the schedule
    group_lr: dict[str, float] = field(default_factory=dict)
    weight_decay: float = 0.05
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    # image : region samples per batch in the mixed stages
    mix: tuple[int, int] = (1, 1)
    # "soft", "hard" or None; "auto" picks soft/hard from the model in s3 and
    # single, and no tags elsewhere
    tags: str | None = "auto"
    train_bridge_in_s3: bool = False
    # bootstrap only: fill the visual slots with a character drawing of the scene
    scene_text: bool = True
    # bootstrap only: score the response tokens alone instead of all text
    targets_only: bool = True

    def __post_init__(self):
        _check_stage(self.stage)
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.lr_min <= self.lr_init:
            raise ValueError("lr_min must not exceed lr_init")
        if not 0 <= self.warmup_steps < self.steps:
            raise ValueError("warmup_steps must lie in [0, steps)")
        if self.tags not in ("auto", "soft", "hard", None):
            raise ValueError(f"bad tags mode {self.tags!r}")
        if min(self.mix) < 0 or sum(self.mix) == 0:
            raise ValueError("mix ratio must be nonnegative and not all zero")
        self.betas = tuple(self.betas)
        self.mix = tuple(self.mix)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "StageConfig":
        return cls(**d)


def default_config(stage: str, **overrides) -> StageConfig:
    """Desk-scale defaults for ``stage``."""
    base: dict = {"stage": stage, "steps": DEFAULT_STEPS[_check_stage(stage)]}
    if stage == "bootstrap":
        base.update(lr_init=3e-3, lr_min=3e-4)
    if stage == "s2":
        base["group_lr"] = {"aggregator": 1e-3}
    base.update(overrides)
    if "warmup_steps" not in overrides:
        # short runs keep the schedule valid
        base["warmup_steps"] = min(StageConfig.warmup_steps, base["steps"] - 1)
    return StageConfig(**base)


def lr_at(step: int, cfg: StageConfig) -> float:
    """Linear warmup from 1e-8, then cosine decay to ``lr_min`` at the last step."""
    if not 0 <= step < cfg.steps:
        raise ValueError(f"step {step} outside [0, {cfg.steps})")
    w = cfg.warmup_steps
    if step < w:
        return WARMUP_FLOOR + (cfg.lr_init - WARMUP_FLOOR) * step / w
    span = cfg.steps - 1 - w
    if span == 0:
        return cfg.lr_init
    progress = (step - w) / span
    return cfg.lr_min + 0.5 * (cfg.lr_init - cfg.lr_min) * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(store: ParamStore, state: AdamState, lr: float, *,
               betas: tuple[float, float] = (0.9, 0.999), weight_decay: float = 0.05,
               eps: float = 1e-8, step: int | None = None,
               group_lr: Mapping[str, float] | None = None) -> None:
    """One decoupled-weight-decay Adam update of every trainable parameter.

    A missing grad counts as zero. Every grad is checked before anything is
    written, so a divergence leaves the store untouched.
    """
    names = store.trainable_names()
    where = state.t if step is None else step
    for n in names:
        g = store[n].grad
        if g is not None and not np.all(np.isfinite(g)):
            raise DivergenceError(where, f"non-finite gradient in {n}")
    b1, b2 = betas
    state.t += 1
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for n in names:
        p = store[n]
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m.get(n)
        if m is None:
            m = state.m[n] = np.zeros_like(p.data)
            state.v[n] = np.zeros_like(p.data)
        v = state.v[n]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        rate = lr
        if group_lr and store.group_of(n) in group_lr:
            rate = group_lr[store.group_of(n)]
        p.data = p.data * (1.0 - rate * weight_decay) - rate * (m / c1) / (np.sqrt(v / c2) + eps)


# ---------------------------------------------------------------------------
# data streams


def split_streams(samples: Sequence[InstructionSample]) -> dict[TaskType, list[InstructionSample]]:
    out: dict[TaskType, list[InstructionSample]] = {t: [] for t in TaskType}
    for s in samples:
        out[s.task].append(s)
    return out


class SampleStream:
    """Endless, seeded, epoch-shuffled view of a sample list.

    Draw ``i`` depends only on ``(seed, i)``.
    """

    def __init__(self, samples: Sequence[InstructionSample], seed: int):
        if not samples:
            raise StreamMismatchError("empty sample stream")
        self.samples = list(samples)
        self.seed = seed
        self._perm: dict[int, list[int]] = {}

    def _order(self, epoch: int) -> list[int]:
        if epoch not in self._perm:
            idx = list(range(len(self.samples)))
            Rng(self.seed * 1_000_003 + epoch).shuffle(idx)
            self._perm = {epoch: idx}
        return self._perm[epoch]

    def take(self, start: int, count: int) -> list[InstructionSample]:
        n = len(self.samples)
        return [self.samples[self._order(i // n)[i % n]] for i in range(start, start + count)]


def batch_split(batch_size: int, tasks: Sequence[TaskType], mix: tuple[int, int]) -> dict[TaskType, int]:
    """Samples per task in one batch. Mixed stages alternate samples by the
    mix ratio, so the counts follow the ratio up to rounding."""
    if len(tasks) == 1:
        return {tasks[0]: batch_size}
    a, b = mix
    pattern = [TaskType.IMAGE_LEVEL] * a + [TaskType.REGION_LEVEL] * b
    counts = {t: 0 for t in tasks}
    for i in range(batch_size):
        counts[pattern[i % len(pattern)]] += 1
    return {t: c for t, c in counts.items() if c}


def _stream_seed(seed: int, stage: str, task: TaskType) -> int:
    return (seed * 7919 + STAGES.index(stage) * 104729 + int(task) * 1299709) & ((1 << 62) - 1)


# ---------------------------------------------------------------------------
# the stage loop


@dataclass
class TrainState:
    """Everything a stage mutates: parameters (inside the model), the
    optimizer, the stage history and the run rng."""

    model: LionModel
    rng: Rng = field(default_factory=lambda: Rng(0))
    history: list[str] = field(default_factory=list)
    opt: AdamState | None = None
    stage: str | None = None
    step: int = 0


def resolve_tags(cfg: StageConfig, model: LionModel) -> str | None:
    if cfg.tags != "auto":
        return cfg.tags
    if cfg.stage in ("s3", "single"):
        return "soft" if model.cfg.soft_prompt else "hard"
    return None


def step_loss(model: LionModel, parts: Mapping[TaskType, Sequence[InstructionSample]],
              tags: str | None, text_only: bool = False, scene_text: bool = False,
              targets_only: bool = False) -> tuple[T.Tensor, dict[TaskType, float]]:
    """Token-weighted mean loss over task-homogeneous sub-batches."""
    losses, counts = {}, {}
    for task, samples in parts.items():
        if text_only:
            loss, n = model.text_loss(samples, tags, return_count=True, scene_text=scene_text,
                                      targets_only=targets_only)
        else:
            batch = model.make_batch(samples, tags)
            loss = model.batch_loss(batch)
            n = batch.n_targets
        losses[task], counts[task] = loss, n
    total = sum(counts.values())
    out = None
    for task, loss in losses.items():
        term = T.scale(loss, counts[task] / total)
        out = term if out is None else T.add(out, term)
    return out, {t: l.item() for t, l in losses.items()}


def run_stage(stage: str, streams, cfg: StageConfig, state: TrainState, *, seed: int = 0,
              log_path: str | Path | None = None, start_step: int = 0,
              stop_step: int | None = None) -> list[dict]:
    """Train one stage; returns the per-step metrics records.

    ``streams`` maps task type to samples (a flat sample list is split by
    task). ``start_step`` > 0 resumes a stage from a checkpoint taken at
    that step; ``stop_step`` ends early (for checkpointing mid-stage).
    """
    _check_stage(stage)
    if cfg.stage != stage:
        raise ValueError(f"config is for stage {cfg.stage!r}, not {stage!r}")
    need = PREREQUISITE.get(stage)
    if need is not None and need not in state.history:
        raise MissingPrerequisiteError(f"stage {stage} needs a completed {need} checkpoint")
    if not isinstance(streams, Mapping):
        streams = split_streams(streams)
    for task, samples in streams.items():
        bad = [s for s in samples if s.task != task]
        if bad:
            raise StreamMismatchError(
                f"{task.label} stream holds a {bad[0].subtype} sample")
    tasks = STAGE_TASKS[stage]
    for task in tasks:
        if not streams.get(task):
            raise StreamMismatchError(f"stage {stage} needs a {task.label} stream")

    model = state.model
    store = model.params
    store.set_trainable(trainable_set(stage, cfg.train_bridge_in_s3))
    if start_step == 0 or state.opt is None or state.stage != stage:
        if start_step:
            raise ValueError("resuming needs the optimizer state of the same stage")
        state.opt = AdamState()
    state.stage = stage

    tags = resolve_tags(cfg, model)
    counts = batch_split(cfg.batch_size, tasks, cfg.mix)
    feeds = {t: SampleStream(streams[t], _stream_seed(seed, stage, t)) for t in counts}
    end = cfg.steps if stop_step is None else min(stop_step, cfg.steps)
    records: list[dict] = []
    fh = open(log_path, "a" if start_step else "w", encoding="utf-8") if log_path else None
    try:
        for k in range(start_step, end):
            lr = lr_at(k, cfg)
            parts = {t: feeds[t].take(k * c, c) for t, c in counts.items()}
            store.zero_grad()
            if stage == "bootstrap":
                # plain text on even steps, text led by hard tags on odd ones
                # (unless tags are switched off)
                btags = "hard" if k % 2 and cfg.tags is not None else None
                loss, per_task = step_loss(model, parts, btags, text_only=True,
                                           scene_text=cfg.scene_text,
                                           targets_only=cfg.targets_only)
            else:
                loss, per_task = step_loss(model, parts, tags)
            if not np.isfinite(loss.item()):
                raise DivergenceError(k, "non-finite loss")
            T.backward(loss)
            adamw_step(store, state.opt, lr, betas=cfg.betas, weight_decay=cfg.weight_decay,
                       eps=cfg.eps, step=k, group_lr=cfg.group_lr)
            state.step = k + 1
            for task, value in per_task.items():
                rec = {"step": k, "stage": stage, "task": task.label, "loss": value, "lr": lr}
                records.append(rec)
                if fh:
                    fh.write(json.dumps(rec) + "\n")
    finally:
        if fh:
            fh.close()
        store.zero_grad()
    if end == cfg.steps:
        state.history.append(stage)
        state.stage, state.step, state.opt = None, 0, None
    return records


# ---------------------------------------------------------------------------
# checkpoints of a training state


def save_state(path: str | Path, state: TrainState, extra: dict | None = None) -> str:
    """Checkpoint parameters, rng, stage history and (mid-stage) optimizer."""
    from . import checkpoint

    prov = {"history": list(state.history), "stage": state.stage, "step": state.step}
    if extra:
        prov.update(extra)
    return checkpoint.save(path, state.model.params, state.rng,
                           model_config=state.model.cfg.to_dict(), provenance=prov,
                           opt=state.opt)


def load_state(path: str | Path) -> TrainState:
    from . import checkpoint
    from .model import ModelConfig

    ck = checkpoint.load(path)
    if ck.model_config is None:
        raise checkpoint.CorruptHeaderError("checkpoint carries no model config")
    model = LionModel(ModelConfig.from_dict(ck.model_config), params=ck.params)
    prov = ck.provenance
    opt = None
    if ck.opt_m or ck.opt_t:
        opt = AdamState(ck.opt_t, ck.opt_m, ck.opt_v)
    return TrainState(model, ck.rng, list(prov.get("history", [])), opt,
                      prov.get("stage"), int(prov.get("step", 0)))
