"""Deterministic synthetic grounding world.

A scene is a small grid of patches holding one to three axis-aligned
objects, each a (color, shape) pair. Everything downstream, from patch
features to tags and instruction samples, is a pure function of the scene
seed and :data:`GENERATOR_VERSION`.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ..moa import TaskType
from ..tensor import Rng
from .bbox import BBox, parse_bbox, serialize_bbox
from .templates import render_template

log = logging.getLogger(__name__)

GENERATOR_VERSION = 1
COLORS = ("red", "green", "blue", "yellow")
SHAPES = ("square", "circle", "triangle", "diamond")
COUNT_WORDS = ("zero", "one", "two", "three", "four")
# stand-in for a large tag vocabulary; distractor tags are drawn from here
TAG_VOCAB = COLORS + SHAPES + (
    "tree", "sky", "grass", "dog", "car", "cup", "table", "cloud", "road", "wall",
)

SUBTYPES = ("caption", "vqa", "vqg", "rec", "reg")
SUBTYPE_TASK = {
    "caption": TaskType.IMAGE_LEVEL,
    "vqa": TaskType.IMAGE_LEVEL,
    "vqg": TaskType.IMAGE_LEVEL,
    "rec": TaskType.REGION_LEVEL,
    "reg": TaskType.REGION_LEVEL,
}
IMAGE_SUBTYPES = ("caption", "vqa", "vqg")
REGION_SUBTYPES = ("rec", "reg")


@dataclass(frozen=True)
class SceneObject:
    color: str
    shape: str
    bbox: BBox

    @property
    def phrase(self) -> str:
        return f"a {self.color} {self.shape}"


@dataclass(frozen=True)
class SyntheticScene:
    seed: int
    grid: int
    objects: tuple[SceneObject, ...]
    feature_seed: int

    def __post_init__(self):
        if not self.objects:
            raise ValueError("a scene needs at least one object")

    @property
    def tags(self) -> list[str]:
        """Ground-truth tags: colors and shapes in raster order, deduplicated."""
        out: list[str] = []
        for obj in raster_order(self.objects):
            for t in (obj.color, obj.shape):
                if t not in out:
                    out.append(t)
        return out


@dataclass
class InstructionSample:
    instruction: str
    target: str
    subtype: str
    scene_seed: int
    gt_bbox: BBox | None = None
    tags: list[str] | None = None

    def __post_init__(self):
        if not self.target:
            raise ValueError("sample target must be nonempty")
        if self.subtype not in SUBTYPE_TASK:
            raise ValueError(f"unknown subtype {self.subtype!r}")
        if self.subtype == "rec" and self.gt_bbox is None:
            raise ValueError("rec samples carry a ground-truth box")

    @property
    def task(self) -> TaskType:
        return SUBTYPE_TASK[self.subtype]

    def to_record(self) -> dict:
        """Field order is fixed: it determines dataset bytes and hashes."""
        rec = {
            "instruction": self.instruction,
            "target": self.target,
            "task": self.task.label,
            "subtype": self.subtype,
        }
        if self.gt_bbox is not None:
            rec["bbox"] = list(self.gt_bbox.as_tuple())
        if self.tags is not None:
            rec["tags"] = list(self.tags)
        rec["scene_seed"] = self.scene_seed
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "InstructionSample":
        sample = cls(
            instruction=rec["instruction"],
            target=rec["target"],
            subtype=rec["subtype"],
            scene_seed=int(rec["scene_seed"]),
            gt_bbox=BBox(*rec["bbox"]) if "bbox" in rec else None,
            tags=list(rec["tags"]) if "tags" in rec else None,
        )
        if rec.get("task", sample.task.label) != sample.task.label:
            raise ValueError(f"record task {rec['task']!r} does not match subtype {sample.subtype!r}")
        return sample


def raster_order(objects: Iterable[SceneObject]) -> list[SceneObject]:
    return sorted(objects, key=lambda o: (o.bbox.y_min, o.bbox.x_min))


@lru_cache(maxsize=8192)
def gen_scene(seed: int, grid: int = 4, max_objects: int = 3, max_size: int = 1) -> SyntheticScene:
    """Place 1..max_objects non-overlapping objects with distinct colors."""
    rng = Rng((seed * 0x2545F4914F6CDD1D + GENERATOR_VERSION) & ((1 << 64) - 1))
    n = 1 + rng.randint(max_objects)
    colors = list(COLORS)
    rng.shuffle(colors)
    occupied = np.zeros((grid, grid), dtype=bool)
    objects = []
    for i in range(n):
        for _ in range(50):
            w = 1 + rng.randint(max_size)
            h = 1 + rng.randint(max_size)
            x0 = rng.randint(grid - w + 1)
            y0 = rng.randint(grid - h + 1)
            if not occupied[y0:y0 + h, x0:x0 + w].any():
                break
        else:
            continue
        occupied[y0:y0 + h, x0:x0 + w] = True
        box = BBox(x0 / grid, y0 / grid, (x0 + w) / grid, (y0 + h) / grid)
        objects.append(SceneObject(colors[i], rng.choice(SHAPES), box))
    return SyntheticScene(seed, grid, tuple(raster_order(objects)), rng.next_u64())


@lru_cache(maxsize=16)
def _codebook(dim: int) -> dict[str, np.ndarray]:
    rng = Rng(0xC0DEB00C + 7919 * dim)
    book = {name: rng.normal(dim) for name in COLORS + SHAPES}
    book["background"] = rng.normal(dim)
    return book


def scene_features(scene: SyntheticScene, dim: int, noise: float = 0.1) -> np.ndarray:
    """Patch features ``[grid*grid, dim]`` in row-major order.

    A covered patch carries ``color + shape`` codes, the rest carry the
    background code; every patch gets seeded Gaussian noise.
    """
    book = _codebook(dim)
    g = scene.grid
    feats = np.tile(book["background"], (g * g, 1))
    for obj in scene.objects:
        x0, y0 = round(obj.bbox.x_min * g), round(obj.bbox.y_min * g)
        x1, y1 = round(obj.bbox.x_max * g), round(obj.bbox.y_max * g)
        for r in range(y0, y1):
            for c in range(x0, x1):
                feats[r * g + c] = book[obj.color] + book[obj.shape]
    if noise > 0:
        feats = feats + noise * Rng(scene.feature_seed).normal(g * g * dim).reshape(g * g, dim)
    return feats


# a slot of the text drawing is four characters: the color and shape
# initials (all distinct) or ".." when empty, then the column as an
# uppercase letter and the row as a digit
SCENE_CODES = {(c, sh): c[0] + sh[0] for c in COLORS for sh in SHAPES}
EMPTY_CODE = ".."
CODE_WIDTH = 4


def cell_code(obj: SceneObject | None, row: int, col: int) -> str:
    what = EMPTY_CODE if obj is None else SCENE_CODES[(obj.color, obj.shape)]
    return what + chr(ord("A") + col) + str(row)


def _top_left(obj: SceneObject, g: int) -> tuple[int, int]:
    return round(obj.bbox.y_min * g), round(obj.bbox.x_min * g)


def scene_grid(scene: SyntheticScene) -> list[str]:
    """The scene drawn as ``grid*grid`` cell codes, row-major."""
    g = scene.grid
    owner: dict[tuple[int, int], SceneObject] = {}
    for obj in scene.objects:
        x0, y0 = round(obj.bbox.x_min * g), round(obj.bbox.y_min * g)
        x1, y1 = round(obj.bbox.x_max * g), round(obj.bbox.y_max * g)
        for r in range(y0, y1):
            for c in range(x0, x1):
                owner[(r, c)] = obj
    return [cell_code(owner.get((r, c)), r, c) for r in range(g) for c in range(g)]


def scene_objects_text(scene: SyntheticScene, width: int) -> list[str]:
    """One code per color in :data:`COLORS` order: the object with that
    color at its top-left cell, or an empty code. Padded or cut to
    ``width``."""
    by_color = {o.color: o for o in scene.objects}
    empty = "." * CODE_WIDTH
    codes = []
    for c in COLORS:
        obj = by_color.get(c)
        codes.append(empty if obj is None else cell_code(obj, *_top_left(obj, scene.grid)))
    return (codes + [empty] * width)[:width]


def tag_provider(scene: SyntheticScene, noise_rate: float, rng: Rng) -> list[str]:
    """True tags, each replaced with probability ``noise_rate`` by a distractor
    that is not a true tag of the scene."""
    if not 0.0 <= noise_rate <= 1.0:
        raise ValueError("noise_rate must lie in [0, 1]")
    truth = scene.tags
    pool = [t for t in TAG_VOCAB if t not in truth]
    out = []
    for t in truth:
        if rng.uniform() < noise_rate:
            out.append(rng.choice(pool))
        else:
            out.append(t)
    return out


def _caption(scene: SyntheticScene) -> str:
    phrases = [o.phrase for o in raster_order(scene.objects)]
    if len(phrases) == 1:
        return phrases[0]
    return ", ".join(phrases[:-1]) + " and " + phrases[-1]


def vqa_pairs(scene: SyntheticScene) -> list[tuple[str, str]]:
    """(question, answer) pairs answerable from the scene without ambiguity."""
    pairs = [("how many objects are there?", COUNT_WORDS[len(scene.objects)])]
    shapes = [o.shape for o in scene.objects]
    for o in raster_order(scene.objects):
        pairs.append((f"what shape is the {o.color} object?", o.shape))
        if shapes.count(o.shape) == 1:
            pairs.append((f"what color is the {o.shape}?", o.color))
    return pairs


def vqa_candidates(question: str) -> list[str]:
    if question.startswith("how many"):
        return list(COUNT_WORDS[1:4])
    if question.startswith("what shape"):
        return list(SHAPES)
    return list(COLORS)


def _referents(scene: SyntheticScene) -> list[SceneObject]:
    keys = [(o.color, o.shape) for o in scene.objects]
    out = []
    for o in raster_order(scene.objects):
        if keys.count((o.color, o.shape)) > 1:
            log.info("scene %d: skipping ambiguous referent %s", scene.seed, o.phrase)
            continue
        out.append(o)
    return out


def build_samples(scene: SyntheticScene, subtypes: Sequence[str], rng: Rng,
                  template_index: int | None = None) -> list[InstructionSample]:
    """One sample per image-level subtype; REC/REG get one per referent."""
    if not subtypes:
        raise ValueError("subtypes must be nonempty")

    def tmpl(sub, slots):
        return render_template(sub, slots, index=template_index, rng=rng)

    out: list[InstructionSample] = []
    for sub in subtypes:
        if sub == "caption":
            out.append(InstructionSample(tmpl(sub, {}), _caption(scene), sub, scene.seed))
        elif sub in ("vqa", "vqg"):
            q, a = rng.choice(vqa_pairs(scene))
            if sub == "vqa":
                out.append(InstructionSample(tmpl(sub, {"Question": q}), a, sub, scene.seed))
            else:
                out.append(InstructionSample(tmpl(sub, {"Answer": a}), q, sub, scene.seed))
        elif sub == "rec":
            for o in _referents(scene):
                out.append(InstructionSample(tmpl(sub, {"expr": o.phrase}),
                                             serialize_bbox(o.bbox), sub, scene.seed,
                                             gt_bbox=o.bbox))
        elif sub == "reg":
            for o in _referents(scene):
                out.append(InstructionSample(tmpl(sub, {"BBox": serialize_bbox(o.bbox)}),
                                             o.phrase, sub, scene.seed, gt_bbox=o.bbox))
        else:
            raise ValueError(f"unknown subtype {sub!r}")
    return out


def reg_box(sample: InstructionSample) -> BBox:
    """The box embedded in a REG instruction."""
    return parse_bbox(sample.instruction)


# ---------------------------------------------------------------------------
# dataset generation and files


@dataclass
class DataConfig:
    n_train_scenes: int = 400
    n_eval_scenes: int = 100
    subtypes: tuple[str, ...] = SUBTYPES
    noise_rate: float = 0.5
    grid: int = 4


@dataclass
class Dataset:
    train: list[InstructionSample] = field(default_factory=list)
    eval: list[InstructionSample] = field(default_factory=list)


def _scene_samples(seed: int, cfg: DataConfig) -> list[InstructionSample]:
    scene = gen_scene(seed, cfg.grid)
    rng = Rng(seed ^ 0x5DEECE66D)
    samples = build_samples(scene, cfg.subtypes, rng)
    tag_rng = rng.fork()
    for s in samples:
        s.tags = tag_provider(scene, cfg.noise_rate, tag_rng)
    return samples


def generate_dataset(seed: int, cfg: DataConfig) -> Dataset:
    """Train and held-out splits from disjoint scene seeds."""
    rng = Rng(seed)
    train_seeds = [int(rng.next_u64() >> 16) for _ in range(cfg.n_train_scenes)]
    eval_seeds = [int(rng.next_u64() >> 16) for _ in range(cfg.n_eval_scenes)]
    overlap = set(train_seeds) & set(eval_seeds)
    eval_seeds = [s for s in eval_seeds if s not in overlap]
    ds = Dataset()
    for s in train_seeds:
        ds.train.extend(_scene_samples(s, cfg))
    for s in eval_seeds:
        ds.eval.extend(_scene_samples(s, cfg))
    return ds


def dumps_samples(samples: Iterable[InstructionSample]) -> bytes:
    lines = [json.dumps(s.to_record(), ensure_ascii=False, separators=(",", ":"))
             for s in samples]
    return ("\n".join(lines) + "\n").encode("utf-8") if lines else b""


def write_samples(path: Path | str, samples: Iterable[InstructionSample]) -> str:
    data = dumps_samples(samples)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def read_samples(path: Path | str) -> list[InstructionSample]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(InstructionSample.from_record(json.loads(line)))
    return out


def dataset_hash(samples: Iterable[InstructionSample]) -> str:
    return hashlib.sha256(dumps_samples(samples)).hexdigest()
