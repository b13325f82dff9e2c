"""Deterministic synthetic grid-world data: scenes, renders, captions, instructions.

Every generator is a pure function of its seed arguments, so two processes
with the same seeds produce byte-equal shards. Captions carry an exact
ground-truth coverage (fraction of scene objects described), which downstream
modules use as the verifiable stand-in for image-text alignment degree.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable

import numpy as np

SHAPES = ("circle", "square", "triangle")
SHAPE_PLURALS = {"circle": "circles", "square": "squares", "triangle": "triangles"}
COLORS = ("red", "green", "blue", "yellow", "purple", "orange", "black", "white")

COLOR_RGB = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "purple": (0.5, 0.0, 0.5),
    "orange": (1.0, 0.5, 0.0),
    "black": (0.0, 0.0, 0.0),
    "white": (1.0, 1.0, 1.0),
}
# Zero red channel so a lone red object is the only source of red in a render.
BACKGROUND_RGB = (0.0, 0.25, 0.35)

PAD, EOS = "<pad>", "<eos>"
DIGITS = tuple(str(d) for d in range(10))
_WORDS = (
    "a", "at", "row", "column", "and", "the",
    "describe", "image", "what", "is", "there", "how", "many",
    "object", "objects", "yes", "no", "nothing",
)

VOCAB = (PAD, EOS) + DIGITS + SHAPES + tuple(SHAPE_PLURALS[s] for s in SHAPES) + COLORS + _WORDS
TOKEN_TO_ID = {tok: i for i, tok in enumerate(VOCAB)}
PAD_ID = TOKEN_TO_ID[PAD]
EOS_ID = TOKEN_TO_ID[EOS]

TASK_KINDS = ("caption", "region_query", "count", "existence")


def encode_tokens(tokens: Iterable[str]) -> list[int]:
    return [TOKEN_TO_ID[t] for t in tokens]


def decode_tokens(ids: Iterable[int]) -> list[str]:
    return [VOCAB[i] for i in ids]


def number_tokens(n: int) -> list[str]:
    """Decimal digit tokens of a non-negative integer ("16" -> ["1", "6"])."""
    if n < 0:
        raise ValueError(f"expected non-negative count, got {n}")
    return list(str(n))


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    row: int
    col: int


@dataclass(frozen=True)
class Scene:
    grid_size: int
    seed: int
    objects: tuple[SceneObject, ...]

    def object_at(self, row: int, col: int) -> SceneObject | None:
        for obj in self.objects:
            if obj.row == row and obj.col == col:
                return obj
        return None

    def count_matching(self, color: str | None = None, shape: str | None = None) -> int:
        return sum(
            1
            for obj in self.objects
            if (color is None or obj.color == color) and (shape is None or obj.shape == shape)
        )


@dataclass(frozen=True)
class CaptionedPair:
    scene: Scene
    caption: tuple[str, ...]
    coverage: float


@dataclass(frozen=True)
class InstructionSample:
    scene: Scene
    task_kind: str
    instruction: tuple[str, ...]
    answer: tuple[str, ...]


class ShardParseError(ValueError):
    """A shard line failed to parse; carries the 1-based line number."""

    def __init__(self, path: str, line: int, reason: str):
        super().__init__(f"{path}: line {line}: {reason}")
        self.path = path
        self.line = line


def _rng(*entropy: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(list(entropy)))


def generate_scene(seed: int, grid_size: int, num_objects: int) -> Scene:
    """Place num_objects shapes on distinct cells of a grid, deterministically."""
    capacity = grid_size * grid_size
    if not 1 <= num_objects <= capacity:
        raise ValueError(
            f"num_objects must be in [1, {capacity}] for grid_size={grid_size}, got {num_objects}"
        )
    rng = _rng(seed, grid_size, num_objects)
    cells = rng.choice(capacity, size=num_objects, replace=False)
    shape_idx = rng.integers(0, len(SHAPES), size=num_objects)
    color_idx = rng.integers(0, len(COLORS), size=num_objects)
    objects = tuple(
        SceneObject(
            shape=SHAPES[shape_idx[i]],
            color=COLORS[color_idx[i]],
            row=int(cells[i]) // grid_size,
            col=int(cells[i]) % grid_size,
        )
        for i in range(num_objects)
    )
    return Scene(grid_size=grid_size, seed=seed, objects=objects)


def render_scene(scene: Scene, resolution: int) -> np.ndarray:
    """Rasterize a scene to a (resolution, resolution, 3) float array in [0, 1]."""
    if resolution % scene.grid_size != 0:
        raise ValueError(
            f"resolution {resolution} not divisible by grid_size {scene.grid_size}"
        )
    cell = resolution // scene.grid_size
    img = np.empty((resolution, resolution, 3), dtype=np.float64)
    img[:, :] = BACKGROUND_RGB
    # Pixel-center coordinates inside one cell, shared by all objects.
    yy, xx = np.mgrid[0:cell, 0:cell].astype(np.float64) + 0.5
    center = cell / 2.0
    for obj in scene.objects:
        if obj.shape == "circle":
            mask = (yy - center) ** 2 + (xx - center) ** 2 <= (0.40 * cell) ** 2
        elif obj.shape == "square":
            half = 0.34 * cell
            mask = (np.abs(yy - center) <= half) & (np.abs(xx - center) <= half)
        else:  # triangle, apex up
            top, bottom = 0.10 * cell, 0.90 * cell
            frac = np.clip((yy - top) / (bottom - top), 0.0, 1.0)
            mask = (yy >= top) & (yy <= bottom) & (np.abs(xx - center) <= frac * 0.42 * cell)
        r0, c0 = obj.row * cell, obj.col * cell
        block = img[r0 : r0 + cell, c0 : c0 + cell]
        block[mask] = COLOR_RGB[obj.color]
    return img


def caption_clause(obj: SceneObject) -> list[str]:
    return ["a", obj.color, obj.shape, "at", "row", *number_tokens(obj.row), "column", *number_tokens(obj.col)]


def join_clauses(clauses: list[list[str]]) -> tuple[str, ...]:
    tokens: list[str] = []
    for i, clause in enumerate(clauses):
        if i > 0:
            tokens.append("and")
        tokens.extend(clause)
    return tuple(tokens)


def generate_caption(scene: Scene, coverage: float, seed: int) -> CaptionedPair:
    """Describe exactly coverage * |objects| objects, chosen by seeded sampling."""
    n = len(scene.objects)
    described = Fraction(coverage).limit_denominator(10**6) * n
    if described.denominator != 1 or described.numerator < 1:
        raise ValueError(
            f"coverage {coverage} times {n} objects is not a positive integer"
        )
    k = int(described)
    rng = _rng(seed, scene.seed, 0xCA)
    picked = rng.choice(n, size=k, replace=False).tolist()
    # Clauses read in row-major order so caption order is predictable from
    # the image, matching the full-caption oracle.
    chosen = sorted((scene.objects[i] for i in picked), key=lambda o: (o.row, o.col))
    return CaptionedPair(scene=scene, caption=join_clauses([caption_clause(o) for o in chosen]), coverage=coverage)


def full_caption(scene: Scene) -> tuple[str, ...]:
    """Canonical full-coverage caption: every object in row-major order."""
    objects = sorted(scene.objects, key=lambda o: (o.row, o.col))
    return join_clauses([caption_clause(o) for o in objects])


def _sample_predicate(scene: Scene, rng: np.random.Generator) -> tuple[str | None, str | None]:
    """Color/shape predicate; biased toward attributes present in the scene."""
    form = rng.integers(0, 3)  # 0 = color+shape, 1 = shape only, 2 = color only
    if rng.random() < 0.5:
        obj = scene.objects[rng.integers(0, len(scene.objects))]
        color, shape = obj.color, obj.shape
    else:
        color = COLORS[rng.integers(0, len(COLORS))]
        shape = SHAPES[rng.integers(0, len(SHAPES))]
    if form == 1:
        return None, shape
    if form == 2:
        return color, None
    return color, shape


def generate_instruction_sample(scene: Scene, task_kind: str, seed: int) -> InstructionSample:
    """Build an instruction whose answer is fixed by the scene oracle."""
    if not scene.objects:
        raise ValueError("scene has no objects")
    if task_kind not in TASK_KINDS:
        raise ValueError(f"unknown task_kind {task_kind!r}")
    rng = _rng(seed, scene.seed, 0x15)

    if task_kind == "caption":
        return InstructionSample(
            scene=scene,
            task_kind=task_kind,
            instruction=("describe", "the", "image"),
            answer=full_caption(scene),
        )

    if task_kind == "region_query":
        occupied = {(o.row, o.col) for o in scene.objects}
        empty = [
            (r, c)
            for r in range(scene.grid_size)
            for c in range(scene.grid_size)
            if (r, c) not in occupied
        ]
        if empty and rng.random() >= 0.7:
            row, col = empty[rng.integers(0, len(empty))]
        else:
            obj = scene.objects[rng.integers(0, len(scene.objects))]
            row, col = obj.row, obj.col
        hit = scene.object_at(row, col)
        answer = (hit.color, hit.shape) if hit is not None else ("nothing",)
        instruction = ("what", "is", "at", "row", *number_tokens(row), "column", *number_tokens(col))
        return InstructionSample(scene, task_kind, instruction, answer)

    color, shape = _sample_predicate(scene, rng)

    if task_kind == "count":
        if color is not None and shape is not None:
            tail = (color, SHAPE_PLURALS[shape])
        elif shape is not None:
            tail = (SHAPE_PLURALS[shape],)
        else:
            tail = (color, "objects")
        answer = tuple(number_tokens(scene.count_matching(color, shape)))
        return InstructionSample(scene, task_kind, ("how", "many", *tail), answer)

    # existence
    if color is not None and shape is not None:
        tail = (color, shape)
    elif shape is not None:
        tail = (shape,)
    else:
        tail = (color, "object")
    answer = ("yes",) if scene.count_matching(color, shape) > 0 else ("no",)
    return InstructionSample(scene, task_kind, ("is", "there", "a", *tail), answer)


# ---------------------------------------------------------------------------
# Shard records (JSON lines)
# ---------------------------------------------------------------------------

def scene_to_json(scene: Scene) -> dict:
    return {
        "grid": scene.grid_size,
        "seed": scene.seed,
        "objects": [
            {"shape": o.shape, "color": o.color, "row": o.row, "col": o.col}
            for o in scene.objects
        ],
    }


def scene_from_json(data: dict) -> Scene:
    return Scene(
        grid_size=data["grid"],
        seed=data["seed"],
        objects=tuple(
            SceneObject(shape=o["shape"], color=o["color"], row=o["row"], col=o["col"])
            for o in data["objects"]
        ),
    )


def pair_record(record_id: str, pair: CaptionedPair) -> dict:
    return {
        "id": record_id,
        "scene": scene_to_json(pair.scene),
        "caption": list(pair.caption),
        "coverage": pair.coverage,
        "task_kind": None,
        "instruction": None,
        "answer": None,
        "score": None,
        "level": None,
    }


def instruction_record(record_id: str, sample: InstructionSample) -> dict:
    return {
        "id": record_id,
        "scene": scene_to_json(sample.scene),
        "caption": list(full_caption(sample.scene)),
        "coverage": 1.0,
        "task_kind": sample.task_kind,
        "instruction": list(sample.instruction),
        "answer": list(sample.answer),
        "score": None,
        "level": None,
    }


def write_shard(records: Iterable[dict], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True, separators=(",", ":")))
            f.write("\n")


def read_shard(path) -> list[dict]:
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ShardParseError(str(path), lineno, f"invalid JSON ({exc.msg})") from exc
            if not isinstance(rec, dict) or "id" not in rec:
                raise ShardParseError(str(path), lineno, "record is not an object with an 'id'")
            records.append(rec)
    return records


def namespace_of(record_id: str) -> str:
    """Split namespace prefix of an id like 'train-7-000042' -> 'train-7'."""
    return record_id.rsplit("-", 1)[0]


def generate_pair_shard(
    seed: int,
    count: int,
    split: str = "train",
    grid_size: int = 4,
    object_counts: tuple[int, ...] = (4, 8),
    coverage_choices: tuple[float, ...] = (0.25, 0.5, 0.75, 1.0),
) -> list[dict]:
    """Image-caption pairs with coverage sampled from the given choices."""
    rng = _rng(seed, 0xF0)
    records = []
    for i in range(count):
        n = int(object_counts[rng.integers(0, len(object_counts))])
        coverage = float(coverage_choices[rng.integers(0, len(coverage_choices))])
        scene_seed = int(rng.integers(0, 2**62))
        caption_seed = int(rng.integers(0, 2**62))
        scene = generate_scene(scene_seed, grid_size, n)
        pair = generate_caption(scene, coverage, caption_seed)
        records.append(pair_record(f"{split}-{seed}-{i:06d}", pair))
    return records


def generate_instruction_shard(
    seed: int,
    count: int,
    split: str = "train",
    grid_size: int = 4,
    min_objects: int = 2,
    max_objects: int = 8,
    task_kinds: tuple[str, ...] = TASK_KINDS,
) -> list[dict]:
    """Instruction/answer samples with task kinds cycling uniformly."""
    rng = _rng(seed, 0xF1)
    records = []
    for i in range(count):
        n = int(rng.integers(min_objects, max_objects + 1))
        scene_seed = int(rng.integers(0, 2**62))
        task_seed = int(rng.integers(0, 2**62))
        scene = generate_scene(scene_seed, grid_size, n)
        sample = generate_instruction_sample(scene, task_kinds[i % len(task_kinds)], task_seed)
        records.append(instruction_record(f"{split}-{seed}-{i:06d}", sample))
    return records
