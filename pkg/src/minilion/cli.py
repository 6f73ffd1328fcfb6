"""Command-line entry point: ``minilion <subcommand> ...``.

Every subcommand prints its resolved configuration as one ``config:`` JSON
line before doing any work. Usage errors exit with status 2, runtime
errors with status 1 and a one-line diagnostic on stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

from . import checkpoint
from .data.scenes import DataConfig, generate_dataset, read_samples, write_samples
from .data.templates import TemplateError, render_template
from .evaluation import TASK_SUBTYPE, run_eval
from .experiments import ExperimentConfig
from .model import ModelConfig
from .tensor import Rng

SEED_ENV = "MINILION_SEED"
_EXP_DEFAULT = ExperimentConfig()


class CliError(Exception):
    pass


def _default_seed() -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise CliError(f"{SEED_ENV}={raw!r} is not an integer") from None


def _echo(config: dict) -> None:
    print("config: " + json.dumps(config, sort_keys=True, default=str), flush=True)


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model")
    g.add_argument("--d-model", type=int, default=ModelConfig.d_model)
    g.add_argument("--vision-layers", type=int, default=ModelConfig.vision_layers)
    g.add_argument("--lm-layers", type=int, default=ModelConfig.lm_layers)
    g.add_argument("--n-heads", type=int, default=ModelConfig.n_heads)
    g.add_argument("--n-queries", type=int, default=ModelConfig.n_queries)
    g.add_argument("--lm-hidden", type=int, default=ModelConfig.lm_hidden)
    g.add_argument("--adapter-dim", type=int, default=ModelConfig.adapter_dim)
    g.add_argument("--max-len", type=int, default=ModelConfig.max_len)
    g.add_argument("--shared-gates", action="store_true")
    g.add_argument("--no-soft-prompt", action="store_true")


def _model_config(a) -> ModelConfig:
    return ModelConfig(d_model=a.d_model, vision_layers=a.vision_layers, lm_layers=a.lm_layers,
                       n_heads=a.n_heads, n_queries=a.n_queries, lm_hidden=a.lm_hidden,
                       adapter_dim=a.adapter_dim,
                       max_len=a.max_len, shared_gates=a.shared_gates,
                       soft_prompt=not a.no_soft_prompt)


def _add_stage_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("schedule (defaults depend on the stage)")
    g.add_argument("--steps", type=int)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--lr", type=float, dest="lr_init")
    g.add_argument("--lr-min", type=float)
    g.add_argument("--warmup", type=int, dest="warmup_steps")
    g.add_argument("--tags", choices=["soft", "hard", "none", "auto"])


def _stage_overrides(a) -> dict:
    out = {}
    for key in ("steps", "batch_size", "lr_init", "lr_min", "warmup_steps"):
        v = getattr(a, key, None)
        if v is not None:
            out[key] = v
    if getattr(a, "tags", None) is not None:
        out["tags"] = None if a.tags == "none" else a.tags
    return out


def _load_split(path: str, split: str):
    p = Path(path)
    if p.is_dir():
        p = p / f"{split}.jsonl"
    if not p.exists():
        raise CliError(f"dataset file {p} not found")
    return read_samples(p)


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(a) -> int:
    cfg = DataConfig(n_train_scenes=a.train_scenes, n_eval_scenes=a.eval_scenes,
                     noise_rate=a.noise_rate, grid=a.grid)
    _echo({"command": "gen-data", "seed": a.seed, "out": a.out, "data": asdict(cfg)})
    ds = generate_dataset(a.seed, cfg)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    h_train = write_samples(out / "train.jsonl", ds.train)
    h_eval = write_samples(out / "eval.jsonl", ds.eval)
    meta = {"seed": a.seed, "data": asdict(cfg), "train_sha256": h_train, "eval_sha256": h_eval,
            "n_train": len(ds.train), "n_eval": len(ds.eval)}
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    print(f"train: {len(ds.train)} samples sha256={h_train}")
    print(f"eval: {len(ds.eval)} samples sha256={h_eval}")
    return 0


def cmd_bootstrap(a) -> int:
    from .model import LionModel
    from .training import TrainState, default_config, run_stage, save_state

    mcfg = _model_config(a)
    scfg = default_config("bootstrap", **_stage_overrides(a))
    _echo({"command": "bootstrap", "seed": a.seed, "data": a.data, "out": a.out,
           "model": mcfg.to_dict(), "stage": scfg.to_dict()})
    samples = _load_split(a.data, "train")
    state = TrainState(LionModel(mcfg, seed=a.seed), Rng(a.seed))
    recs = run_stage("bootstrap", samples, scfg, state, seed=a.seed, log_path=a.log)
    digest = save_state(a.out, state)
    print(f"final loss {recs[-1]['loss']:.6f}; checkpoint sha256={digest}")
    return 0


def cmd_train(a) -> int:
    from .training import default_config, load_state, run_stage, save_state

    scfg = default_config(a.stage, **_stage_overrides(a))
    _echo({"command": "train", "stage": a.stage, "seed": a.seed, "data": a.data,
           "init": a.init, "out": a.out, "log": a.log, "stage_config": scfg.to_dict()})
    state = load_state(a.init)
    samples = _load_split(a.data, "train")
    start = state.step if state.stage == a.stage else 0
    recs = run_stage(a.stage, samples, scfg, state, seed=a.seed, log_path=a.log,
                     start_step=start, stop_step=a.stop_at)
    digest = save_state(a.out, state)
    last = recs[-1]["loss"] if recs else float("nan")
    print(f"{a.stage}: {len(recs)} loss records, last {last:.6f}; checkpoint sha256={digest}")
    return 0


def cmd_eval(a) -> int:
    _echo({"command": "eval", "task": a.task, "data": a.data, "split": a.split,
           "checkpoint": a.checkpoint, "tags": a.tags, "policy": a.policy, "seed": a.seed,
           "limit": a.limit})
    path = Path(a.data)
    if path.is_dir():
        path = path / f"{a.split}.jsonl"
    if not path.exists():
        raise CliError(f"dataset file {path} not found")
    report = run_eval(a.task, path, a.checkpoint, tags=None if a.tags == "none" else a.tags,
                      policy=a.policy, seed=a.seed, limit=a.limit, out=a.out)
    print(f"{report.task} {report.metric} = {report.value:.6f} over {report.n_samples} samples")
    return 0


def cmd_render_template(a) -> int:
    slots = {}
    for key, value in (("expr", a.expr), ("BBox", a.bbox), ("Question", a.question),
                       ("Answer", a.answer)):
        if value is not None:
            slots[key] = value
    for item in a.slot or []:
        if "=" not in item:
            raise CliError(f"--slot expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        slots[k] = v
    _echo({"command": "render-template", "subtype": a.subtype, "index": a.index,
           "seed": a.seed, "slots": slots})
    rng = Rng(a.seed)
    try:
        print(render_template(a.subtype, slots, index=a.index, rng=rng))
    except TemplateError as e:
        raise CliError(str(e)) from None
    return 0


def cmd_inspect(a) -> int:
    _echo({"command": "inspect-checkpoint", "path": a.path})
    info = checkpoint.describe(a.path)
    print(json.dumps(info, indent=2, sort_keys=True))
    return 0


def cmd_conflict(a) -> int:
    from .experiments import conflict_experiment, soft_prompt_experiment

    cfg = ExperimentConfig(seed=a.seed, model=_model_config(a),
                           data=DataConfig(n_train_scenes=a.train_scenes,
                                           n_eval_scenes=a.eval_scenes, noise_rate=a.noise_rate),
                           bootstrap_steps=a.bootstrap_steps,
                           stage_steps=tuple(a.stage_steps), single_steps=a.single_steps,
                           no_router_arm=a.no_router, eval_limit=a.eval_limit,
                           tags=None if a.tags == "none" else a.tags,
                           precision=a.precision)
    _echo({"command": "conflict", "experiment": a.experiment, **cfg.to_dict()})
    if a.experiment == "soft-prompt":
        report = soft_prompt_experiment(cfg)
    else:
        report = conflict_experiment(cfg)
    text = json.dumps(report.to_dict(), indent=2, sort_keys=True)
    if a.out:
        Path(a.out).write_text(text + "\n")
    print(text)
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    seed = _default_seed()
    parser = argparse.ArgumentParser(prog="minilion", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="subcommand")

    p = sub.add_parser("gen-data", help="generate the synthetic instruction dataset")
    p.add_argument("--seed", type=int, default=seed)
    p.add_argument("--out", required=True)
    p.add_argument("--train-scenes", type=int, default=DataConfig.n_train_scenes)
    p.add_argument("--eval-scenes", type=int, default=DataConfig.n_eval_scenes)
    p.add_argument("--noise-rate", type=float, default=DataConfig.noise_rate)
    p.add_argument("--grid", type=int, default=DataConfig.grid)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("bootstrap", help="pretrain the toy language model on text")
    p.add_argument("--seed", type=int, default=seed)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--log")
    _add_model_flags(p)
    _add_stage_flags(p)
    p.set_defaults(func=cmd_bootstrap)

    p = sub.add_parser("train", help="run one training stage from a checkpoint")
    p.add_argument("--stage", required=True, choices=["s1", "s2", "s3", "single"])
    p.add_argument("--seed", type=int, default=seed)
    p.add_argument("--data", required=True)
    p.add_argument("--init", required=True, help="checkpoint to start from")
    p.add_argument("--out", required=True)
    p.add_argument("--log")
    p.add_argument("--stop-at", type=int, help="stop (and checkpoint) before this step")
    _add_stage_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--task", required=True, choices=sorted(TASK_SUBTYPE))
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="eval", choices=["train", "eval"])
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out")
    p.add_argument("--tags", default="none", choices=["soft", "hard", "none"])
    p.add_argument("--policy", default="train", choices=["train", "eval"])
    p.add_argument("--limit", type=int)
    p.add_argument("--seed", type=int, default=seed)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("render-template", help="print one rendered instruction template")
    p.add_argument("--subtype", required=True)
    p.add_argument("--index", type=int)
    p.add_argument("--seed", type=int, default=seed)
    p.add_argument("--expr")
    p.add_argument("--bbox")
    p.add_argument("--question")
    p.add_argument("--answer")
    p.add_argument("--slot", action="append", help="extra placeholder as key=value")
    p.set_defaults(func=cmd_render_template)

    p = sub.add_parser("inspect-checkpoint", help="summarise a checkpoint file")
    p.add_argument("path")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("conflict", help="stage-wise vs single-stage (or soft vs hard tags)")
    p.add_argument("--experiment", default="stages", choices=["stages", "soft-prompt"])
    p.add_argument("--seed", type=int, default=seed)
    p.add_argument("--out")
    p.add_argument("--train-scenes", type=int, default=DataConfig.n_train_scenes)
    p.add_argument("--eval-scenes", type=int, default=DataConfig.n_eval_scenes)
    p.add_argument("--noise-rate", type=float, default=DataConfig.noise_rate)
    p.add_argument("--bootstrap-steps", type=int, default=ExperimentConfig.bootstrap_steps)
    p.add_argument("--stage-steps", type=int, nargs=3, default=list(_EXP_DEFAULT.stage_steps),
                   metavar=("S1", "S2", "S3"))
    p.add_argument("--single-steps", type=int, default=ExperimentConfig.single_steps)
    p.add_argument("--precision", default=ExperimentConfig.precision,
                   choices=["float32", "float64"])
    p.add_argument("--no-router", action="store_true", help="add a stage-wise arm without router")
    p.add_argument("--tags", default="none", choices=["soft", "hard", "none"])
    p.add_argument("--eval-limit", type=int)
    _add_model_flags(p)
    p.set_defaults(func=cmd_conflict)
    return parser


def main(argv: list[str] | None = None) -> int:
    try:
        parser = build_parser()
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else 0
    try:
        return args.func(args)
    except (CliError, checkpoint.CheckpointError, ValueError, KeyError, OSError, RuntimeError) as e:
        msg = str(e).splitlines()[0] if str(e) else type(e).__name__
        print(f"error: {type(e).__name__}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
