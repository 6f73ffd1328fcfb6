"""Directional experiments: stage-wise vs single-stage training, and soft
vs hard tag prompts.

Every arm starts from the same bootstrapped model (same seed, same data),
trains under a matched step budget and is scored on held-out scenes.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field, replace

from .data.scenes import DataConfig, Dataset, generate_dataset
from .evaluation import evaluate
from .model import LionModel, ModelConfig
from .params import ParamStore
from .training import (
    STAGES,
    StageConfig,
    TrainState,
    default_config,
    run_stage,
)
from .tensor import Rng, precision


class BudgetMismatchError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    bootstrap_steps: int = 1500
    stage_steps: tuple[int, int, int] = (300, 600, 600)
    single_steps: int = 1500
    batch_size: int = 16
    # extra StageConfig fields per stage name
    overrides: dict[str, dict] = field(default_factory=dict)
    # tag mode for s3 and single; None trains and evaluates without tags
    tags: str | None = None
    no_router_arm: bool = False
    eval_limit: int | None = None
    precision: str = "float32"

    def stage_config(self, stage: str) -> StageConfig | None:
        if stage == "bootstrap":
            steps = self.bootstrap_steps
        elif stage == "single":
            steps = self.single_steps
        else:
            steps = self.stage_steps[("s1", "s2", "s3").index(stage)]
        if steps == 0:
            return None
        kw = {"steps": steps, "batch_size": self.batch_size}
        if stage in ("s3", "single"):
            kw["tags"] = self.tags
        kw.update(self.overrides.get(stage, {}))
        if "warmup_steps" not in kw:
            kw["warmup_steps"] = min(default_config(stage).warmup_steps, steps - 1)
        return default_config(stage, **kw)

    def check_budget(self) -> None:
        if self.single_steps != sum(self.stage_steps):
            raise BudgetMismatchError(
                f"single-stage arm has {self.single_steps} steps but the stage-wise arm has "
                f"{sum(self.stage_steps)} ({'+'.join(map(str, self.stage_steps))})")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ArmResult:
    name: str
    image_acc: float
    rec_acc: float
    seconds: float
    final_losses: dict[str, float] = field(default_factory=dict)


@dataclass
class ComparisonReport:
    arms: dict[str, ArmResult]
    baseline: str
    candidate: str

    def margin(self, metric: str) -> float:
        return getattr(self.arms[self.candidate], metric) - getattr(self.arms[self.baseline], metric)

    def to_dict(self) -> dict:
        return {
            "arms": {k: asdict(v) for k, v in self.arms.items()},
            "baseline": self.baseline,
            "candidate": self.candidate,
            "margin_rec": self.margin("rec_acc"),
            "margin_image": self.margin("image_acc"),
        }


def bootstrap_model(cfg: ExperimentConfig, ds: Dataset, tags: bool = False) -> LionModel:
    model = LionModel(cfg.model, seed=cfg.seed)
    stage = cfg.stage_config("bootstrap")
    if stage is not None:
        stage = replace(stage, tags="auto" if tags else None)
        run_stage("bootstrap", ds.train, stage, TrainState(model, Rng(cfg.seed)), seed=cfg.seed)
    return model


def _clone(model: LionModel, **changes) -> LionModel:
    """Same parameters under a changed config; params the new config lacks
    are dropped, so the clone is an exact copy of the shared init."""
    mcfg = replace(model.cfg, **changes)
    fresh = LionModel(mcfg, seed=0)
    store = ParamStore()
    for name, p in fresh.params.items():
        src = model.params if name in model.params else fresh.params
        store.add(name, src[name].data.copy(), p.group)
    return LionModel(mcfg, params=store)


def _final_losses(records: list[dict]) -> dict[str, float]:
    out: dict[str, list[float]] = {}
    for r in records[-40:]:
        out.setdefault(r["task"], []).append(r["loss"])
    return {k: sum(v) / len(v) for k, v in out.items()}


def _train_arm(model: LionModel, stages: list[str], cfg: ExperimentConfig, ds: Dataset,
               history: list[str] | None = None) -> tuple[TrainState, list[dict]]:
    state = TrainState(model, Rng(cfg.seed), list(history or ["bootstrap"]))
    records: list[dict] = []
    for stage in stages:
        sc = cfg.stage_config(stage)
        if sc is None:
            state.history.append(stage)
            continue
        records += run_stage(stage, ds.train, sc, state, seed=cfg.seed)
    return state, records


def score(model: LionModel, ds: Dataset, tags: str | None, limit: int | None) -> tuple[float, float]:
    image = evaluate(model, ds.eval, "vqa", tags=tags, limit=limit).value
    rec = evaluate(model, ds.eval, "rec", tags=tags, limit=limit).value
    return image, rec


def _eval_tags(cfg: ExperimentConfig, model: LionModel) -> str | None:
    if cfg.tags is None:
        return None
    return "soft" if model.cfg.soft_prompt and cfg.tags == "soft" else "hard"


def conflict_experiment(cfg: ExperimentConfig, dataset: Dataset | None = None,
                        base: LionModel | None = None, log=print) -> ComparisonReport:
    """Single-stage arm vs stage-wise arm with the router (and optionally a
    stage-wise arm that sums adapters without a router).

    ``base`` is a bootstrapped model to start from; by default one is
    bootstrapped here.
    """
    cfg.check_budget()
    with precision(cfg.precision):
        ds = dataset or generate_dataset(cfg.seed, cfg.data)
        base = _clone(base) if base is not None else bootstrap_model(cfg, ds)
        arms = {}
        plan = [("single", {"routing": "shared"}, ["single"]),
                ("stagewise", {"routing": "task"}, ["s1", "s2", "s3"])]
        if cfg.no_router_arm:
            plan.append(("stagewise_no_router", {"routing": "sum"}, ["s1", "s2", "s3"]))
        for name, change, stages in plan:
            t0 = time.perf_counter()
            model = _clone(base, **change)
            _, records = _train_arm(model, stages, cfg, ds)
            image, rec = score(model, ds, _eval_tags(cfg, model), cfg.eval_limit)
            arms[name] = ArmResult(name, image, rec, time.perf_counter() - t0,
                                   _final_losses(records))
            log(f"{name}: image_acc={image:.4f} rec_acc={rec:.4f} ({arms[name].seconds:.1f}s)")
    return ComparisonReport(arms, "single", "stagewise")


def soft_prompt_experiment(cfg: ExperimentConfig, dataset: Dataset | None = None,
                           base: LionModel | None = None, log=print) -> ComparisonReport:
    """Soft hint slot vs the plain-text hint, both with noisy tags in s3.

    Stages 1 and 2 never see tags, so both arms share them and branch at s3.
    ``base`` should be bootstrapped with tags in the text.
    """
    with precision(cfg.precision):
        ds = dataset or generate_dataset(cfg.seed, cfg.data)
        base = _clone(base) if base is not None else bootstrap_model(cfg, ds, tags=True)
        t0 = time.perf_counter()
        state, _ = _train_arm(base, ["s1", "s2"], cfg, ds)
        shared = time.perf_counter() - t0
        arms = {}
        for name, soft in (("hard", False), ("soft", True)):
            t0 = time.perf_counter()
            model = _clone(state.model, soft_prompt=soft)
            tags = "soft" if soft else "hard"
            arm_cfg = replace(cfg, tags=tags)
            _, records = _train_arm(model, ["s3"], arm_cfg, ds, history=state.history)
            image, rec = score(model, ds, tags, cfg.eval_limit)
            arms[name] = ArmResult(name, image, rec, shared + time.perf_counter() - t0,
                                   _final_losses(records))
            log(f"{name}: image_acc={image:.4f} rec_acc={rec:.4f} ({arms[name].seconds:.1f}s)")
    return ComparisonReport(arms, "hard", "soft")


__all__ = [
    "BudgetMismatchError", "ExperimentConfig", "ArmResult", "ComparisonReport",
    "conflict_experiment", "soft_prompt_experiment", "bootstrap_model", "STAGES",
]
