"""Metrics and evaluation drivers.

* REC: greedy decode, parse the box, correct iff IoU >= 0.5.
* VQA: top-1 by candidate log-likelihood (ties go to the lowest index).
* caption / VQG / REG: exact match of the greedy output after case and
  whitespace normalisation.
* dialog-style ranking: MRR of the reference among the candidates.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data.bbox import BBox, BBoxParseError, parse_bbox
from .data.scenes import InstructionSample, read_samples, vqa_candidates
from .data.templates import EVAL_INSTRUCTIONS
from .model import LionModel

IOU_THRESHOLD = 0.5
TASK_SUBTYPE = {"rec": "rec", "reg": "reg", "caption": "caption", "vqa": "vqa",
                "vqg": "vqg", "vqa_mrr": "vqa"}


class TaskMismatchError(ValueError):
    pass


def iou(a: BBox, b: BBox) -> float:
    ix = max(0.0, min(a.x_max, b.x_max) - max(a.x_min, b.x_min))
    iy = max(0.0, min(a.y_max, b.y_max) - max(a.y_min, b.y_min))
    inter = ix * iy
    if inter == 0.0:
        return 0.0
    union = a.area + b.area - inter
    return inter / union


def try_parse(text: str) -> BBox | None:
    try:
        return parse_bbox(text)
    except BBoxParseError:
        return None


def rec_hit(prediction: str, gt: BBox) -> bool:
    box = try_parse(prediction)
    return box is not None and iou(box, gt) >= IOU_THRESHOLD


def rec_accuracy(predictions: Sequence[str], gts: Sequence[BBox]) -> float:
    """Share of predictions that parse and reach IoU 0.5. Unparseable output
    simply counts as a miss."""
    if len(predictions) != len(gts):
        raise ValueError("predictions and ground truths differ in length")
    if not gts:
        return 0.0
    return sum(rec_hit(p, g) for p, g in zip(predictions, gts)) / len(gts)


def mrr(positions: Sequence[int]) -> float:
    if len(positions) == 0:
        raise ValueError("mrr of an empty list")
    if any(p < 1 for p in positions):
        raise ValueError("rank positions start at 1")
    return sum(1.0 / p for p in positions) / len(positions)


def rank_of(scores: Sequence[float], correct: int) -> int:
    """1-based rank of ``correct`` under descending score; ties go to the
    lower index, so a tied correct candidate at a higher index ranks after."""
    s = scores[correct]
    better = sum(1 for i, v in enumerate(scores) if v > s or (v == s and i < correct))
    return better + 1


def normalize(text: str) -> str:
    return " ".join(text.lower().split())


# ---------------------------------------------------------------------------
# reports


@dataclass
class SampleRecord:
    prediction: str
    target: str
    correct: bool
    score: float
    bbox: list[float] | None = None


@dataclass
class EvalReport:
    task: str
    metric: str
    n_samples: int
    value: float
    records: list[SampleRecord] = field(default_factory=list)

    def recompute(self) -> float:
        if self.metric == "mrr":
            return mrr([int(round(1.0 / r.score)) for r in self.records])
        if not self.records:
            return 0.0
        return sum(r.correct for r in self.records) / len(self.records)

    def to_dict(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        head = {"task": self.task, "metric": self.metric, "n_samples": self.n_samples,
                "value": self.value}
        lines = [json.dumps(head)] + [json.dumps(asdict(r)) for r in self.records]
        return "\n".join(lines) + "\n"

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")


def _instruction_policy(samples: Sequence[InstructionSample], policy: str,
                        seed: int) -> list[InstructionSample]:
    """``train``: keep each sample's (randomly drawn) training template;
    ``eval``: swap in the fixed evaluation instruction where one exists."""
    if policy == "train":
        return list(samples)
    if policy != "eval":
        raise ValueError(f"unknown instruction policy {policy!r}")
    out = []
    for s in samples:
        if s.subtype == "vqa":
            q = _vqa_question(s)
            out.append(InstructionSample(EVAL_INSTRUCTIONS["vqa"].format(Question=q), s.target,
                                         s.subtype, s.scene_seed, s.gt_bbox, s.tags))
        elif s.subtype == "caption":
            out.append(InstructionSample(EVAL_INSTRUCTIONS["caption"], s.target, s.subtype,
                                         s.scene_seed, s.gt_bbox, s.tags))
        else:
            out.append(s)
    return out


def _vqa_question(s: InstructionSample) -> str:
    for q in ("how many objects are there?",):
        if q in s.instruction:
            return q
    for prefix in ("what shape is the ", "what color is the "):
        i = s.instruction.find(prefix)
        if i >= 0:
            j = s.instruction.index("?", i)
            return s.instruction[i:j + 1]
    raise ValueError("sample holds no recognisable VQA question")


def _chunks(items, n):
    for i in range(0, len(items), n):
        yield items[i:i + n]


def eval_rec(model: LionModel, samples: Sequence[InstructionSample], tags: str | None = None,
             batch_size: int = 32, max_new: int = 32) -> EvalReport:
    records = []
    for chunk in _chunks(list(samples), batch_size):
        outs = model.greedy_decode(chunk, max_new=max_new, tags=tags)
        for s, ids in zip(chunk, outs):
            text = model.decode_text(ids)
            box = try_parse(text)
            overlap = iou(box, s.gt_bbox) if box is not None else 0.0
            records.append(SampleRecord(text, s.target, box is not None and overlap >= IOU_THRESHOLD,
                                        overlap, list(box.as_tuple()) if box else None))
    value = sum(r.correct for r in records) / len(records) if records else 0.0
    return EvalReport("rec", "iou@0.5", len(records), value, records)


def eval_generation(model: LionModel, samples: Sequence[InstructionSample], task: str,
                    tags: str | None = None, batch_size: int = 32,
                    max_new: int = 48) -> EvalReport:
    records = []
    for chunk in _chunks(list(samples), batch_size):
        outs = model.greedy_decode(chunk, max_new=max_new, tags=tags)
        for s, ids in zip(chunk, outs):
            text = model.decode_text(ids)
            ok = normalize(text) == normalize(s.target)
            records.append(SampleRecord(text, s.target, ok, float(ok)))
    value = sum(r.correct for r in records) / len(records) if records else 0.0
    return EvalReport(task, "exact_match", len(records), value, records)


def eval_candidates(model: LionModel, samples: Sequence[InstructionSample], task: str = "vqa",
                    tags: str | None = None, metric: str = "top1") -> EvalReport:
    """Rank the fixed answer set of each VQA question by log-likelihood."""
    records = []
    for s in samples:
        cands = vqa_candidates(_vqa_question(s))
        if s.target not in cands:
            raise TaskMismatchError(f"target {s.target!r} is not among the candidates")
        scores = model.score_candidates(s, cands, tags=tags)
        gold = cands.index(s.target)
        rank = rank_of(scores, gold)
        best = cands[int(np.argmax(scores))]
        if metric == "mrr":
            records.append(SampleRecord(best, s.target, rank == 1, 1.0 / rank))
        else:
            records.append(SampleRecord(best, s.target, rank == 1, scores[gold]))
    if metric == "mrr":
        value = mrr([int(round(1.0 / r.score)) for r in records]) if records else 0.0
        return EvalReport(task, "mrr", len(records), value, records)
    value = sum(r.correct for r in records) / len(records) if records else 0.0
    return EvalReport(task, "top1", len(records), value, records)


def evaluate(model: LionModel, samples: Sequence[InstructionSample], task: str,
             tags: str | None = None, policy: str = "train", seed: int = 0,
             limit: int | None = None) -> EvalReport:
    """Evaluate ``task`` on the matching subtype of ``samples``."""
    if task not in TASK_SUBTYPE:
        raise TaskMismatchError(f"unknown task {task!r}")
    sub = TASK_SUBTYPE[task]
    chosen = [s for s in samples if s.subtype == sub]
    if not chosen:
        raise TaskMismatchError(f"no {sub} samples for task {task!r}")
    if limit is not None:
        chosen = chosen[:limit]
    chosen = _instruction_policy(chosen, policy, seed)
    if task == "rec":
        return eval_rec(model, chosen, tags)
    if task == "vqa":
        return eval_candidates(model, chosen, "vqa", tags)
    if task == "vqa_mrr":
        return eval_candidates(model, chosen, "vqa_mrr", tags, metric="mrr")
    return eval_generation(model, chosen, task, tags)


def run_eval(task: str, dataset: str | Path, checkpoint_path: str | Path, *,
             tags: str | None = None, policy: str = "train", seed: int = 0,
             limit: int | None = None, out: str | Path | None = None) -> EvalReport:
    """Load a checkpoint and a dataset file, evaluate ``task``, optionally
    write the report."""
    from .training import load_state

    state = load_state(checkpoint_path)
    report = evaluate(state.model, read_samples(dataset), task, tags=tags, policy=policy,
                      seed=seed, limit=limit)
    if out is not None:
        report.write(out)
    return report
