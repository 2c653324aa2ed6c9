"""Procedural scenes, rendering, QA generation and dataset curation.

Scenes are a small grid of coloured shapes plus an optional glyph string
drawn in a fixed 5x7 bitmap font along the bottom band of the image.
Rasterization is integer-only; floats appear only in the final /255.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import re
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, SceneError, SplitError

log = logging.getLogger(__name__)

IMAGE_SIZE = 48
CELL = 16
MARGIN = 2
GLYPH_ROW = 40
GLYPH_X0 = 3
GLYPH_ADVANCE = 7
MAX_GLYPHS = 6
OBJECT_ROWS = 2  # object area is the top 32 pixel rows

SHAPES = ("square", "circle", "triangle")
PALETTE: dict[str, tuple[int, int, int]] = {
    "red": (255, 0, 0),
    "green": (0, 200, 0),
    "blue": (0, 0, 255),
    "yellow": (255, 255, 0),
    "cyan": (0, 255, 255),
    "magenta": (255, 0, 255),
    "white": (255, 255, 255),
    "orange": (255, 128, 0),
}
BACKGROUND = (0, 0, 0)
GLYPH_COLOR = (255, 255, 255)

_FONT_ROWS = {
    "E": ("#####", "#....", "#....", "####.", "#....", "#....", "#####"),
    "H": ("#...#", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"),
    "K": ("#...#", "#..#.", "#.#..", "##...", "#.#..", "#..#.", "#...#"),
    "P": ("####.", "#...#", "#...#", "####.", "#....", "#....", "#...."),
    "T": ("#####", "..#..", "..#..", "..#..", "..#..", "..#..", "..#.."),
    "X": ("#...#", "#...#", ".#.#.", "..#..", ".#.#.", "#...#", "#...#"),
}
GLYPH_ALPHABET = "".join(sorted(_FONT_ROWS))
FONT = {ch: np.array([[c == "#" for c in row] for row in rows], dtype=bool) for ch, rows in _FONT_ROWS.items()}

TASKS = ("caption", "count", "color", "glyph_read", "exist")
SPLITS = ("train", "val", "test")
NUMBER_WORDS = ("zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten")
COUNT_NOUNS = {"objects": None, "squares": "square", "circles": "circle", "triangles": "triangle"}


@dataclass(frozen=True)
class SceneObject:
    cell: tuple[int, int]
    shape: str
    color: str


@dataclass(frozen=True)
class SceneSpec:
    rows: int = OBJECT_ROWS
    cols: int = IMAGE_SIZE // CELL
    objects: tuple[SceneObject, ...] = ()
    glyph_text: str | None = None
    seed: int = 0

    def validate(self) -> None:
        if self.rows * CELL > GLYPH_ROW or self.cols * CELL > IMAGE_SIZE or self.rows < 1 or self.cols < 1:
            raise SceneError(f"grid {self.rows}x{self.cols} does not fit the object area")
        if len(self.objects) > self.rows * self.cols:
            raise SceneError(f"{len(self.objects)} objects overfill a {self.rows}x{self.cols} grid")
        seen = set()
        for obj in self.objects:
            r, c = obj.cell
            if not (0 <= r < self.rows and 0 <= c < self.cols):
                raise SceneError(f"cell {obj.cell} outside {self.rows}x{self.cols} grid")
            if obj.cell in seen:
                raise SceneError(f"two objects share cell {obj.cell}")
            seen.add(obj.cell)
            if obj.shape not in SHAPES:
                raise SceneError(f"unknown shape {obj.shape!r}")
            if obj.color not in PALETTE:
                raise SceneError(f"colour {obj.color!r} not in palette")
        if self.glyph_text is not None:
            if len(self.glyph_text) > MAX_GLYPHS:
                raise SceneError(f"glyph text longer than {MAX_GLYPHS}: {self.glyph_text!r}")
            bad = set(self.glyph_text) - set(GLYPH_ALPHABET)
            if bad:
                raise SceneError(f"glyphs {sorted(bad)} outside alphabet {GLYPH_ALPHABET}")

    def sorted_objects(self) -> list[SceneObject]:
        return sorted(self.objects, key=lambda o: o.cell)

    def to_dict(self) -> dict:
        return {
            "rows": self.rows,
            "cols": self.cols,
            "objects": [{"cell": list(o.cell), "shape": o.shape, "color": o.color} for o in self.objects],
            "glyph_text": self.glyph_text,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        objs = tuple(SceneObject(tuple(o["cell"]), o["shape"], o["color"]) for o in d.get("objects", ()))
        return cls(d["rows"], d["cols"], objs, d.get("glyph_text"), d.get("seed", 0))


def scene_hash(scene: SceneSpec) -> str:
    """Content hash of what the image shows (the provenance seed is excluded)."""
    d = scene.to_dict()
    d.pop("seed")
    d["objects"] = sorted(d["objects"], key=lambda o: o["cell"])
    blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def shape_mask(shape: str, size: int = CELL - 2 * MARGIN) -> np.ndarray:
    y, x = np.mgrid[0:size, 0:size]
    if shape == "square":
        return np.ones((size, size), dtype=bool)
    if shape == "circle":
        c = size - 1
        return (2 * x - c) ** 2 + (2 * y - c) ** 2 <= size * size
    if shape == "triangle":
        return np.abs(2 * x - (size - 1)) <= y
    raise SceneError(f"unknown shape {shape!r}")


def render_uint8(scene: SceneSpec) -> np.ndarray:
    scene.validate()
    img = np.empty((IMAGE_SIZE, IMAGE_SIZE, 3), dtype=np.uint8)
    img[:] = BACKGROUND
    inner = CELL - 2 * MARGIN
    for obj in scene.objects:
        r, c = obj.cell
        y0, x0 = r * CELL + MARGIN, c * CELL + MARGIN
        block = img[y0: y0 + inner, x0: x0 + inner]
        block[shape_mask(obj.shape)] = PALETTE[obj.color]
    if scene.glyph_text:
        for k, ch in enumerate(scene.glyph_text):
            x0 = GLYPH_X0 + k * GLYPH_ADVANCE
            region = img[GLYPH_ROW: GLYPH_ROW + 7, x0: x0 + 5]
            region[FONT[ch]] = GLYPH_COLOR
    return img


@lru_cache(maxsize=8192)
def _render_cached(scene: SceneSpec) -> np.ndarray:
    img = render_uint8(scene).astype(np.float64) / 255.0
    img.setflags(write=False)
    return img


def render(scene: SceneSpec) -> np.ndarray:
    """48x48x3 float image in [0, 1]; identical scenes give identical bytes."""
    return _render_cached(scene)


# -- questions ---------------------------------------------------------------
PARAPHRASES: dict[str, tuple[str, ...]] = {
    "caption": ("Describe the image.", "Describe this image.", "Caption the image.", "What is shown?"),
    "count": ("How many {noun} are there?", "Count the {noun} in the image.",
              "What is the number of {noun}?", "How many {noun} can you see?"),
    "color": ("What color is the {shape}?", "Identify the {shape}'s color.",
              "Which color does the {shape} have?", "Tell me the color of the {shape}."),
    "glyph_read": ("What does the text say?", "Read the text in the image.",
                   "Which letters are written?", "What is written at the bottom?"),
    "exist": ("Is there a {color} {shape}?", "Does the image contain a {color} {shape}?",
              "Can you find a {color} {shape}?", "Is a {color} {shape} present?"),
}

EXPANSIONS: dict[str, str] = {
    "count": "There are {a} objects in the image.",
    "color": "The object shown in the image is {a}.",
    "glyph_read": "The text in the image reads {a}.",
    "exist": "The answer is {a}.",
}


def _template_regex(template: str) -> re.Pattern:
    parts = re.split(r"(\{\w+\})", template)
    out = []
    for part in parts:
        m = re.fullmatch(r"\{(\w+)\}", part)
        out.append(f"(?P<{m.group(1)}>[a-z]+)" if m else re.escape(part))
    return re.compile("^" + "".join(out) + "$")


_REGEXES = {task: [_template_regex(t) for t in bank] for task, bank in PARAPHRASES.items()}


def parse_instruction(task: str, instruction: str) -> tuple[int, dict[str, str]]:
    """Which paraphrase produced ``instruction`` and with which arguments."""
    for i, rx in enumerate(_REGEXES[task]):
        m = rx.match(instruction)
        if m:
            return i, m.groupdict()
    raise ValueError(f"instruction {instruction!r} is not in the {task} bank")


def caption_for(scene: SceneSpec) -> str:
    parts = [f"{o.color} {o.shape}" for o in scene.sorted_objects()]
    text = ", ".join(parts) if parts else "nothing"
    if scene.glyph_text:
        text += f", text {scene.glyph_text}"
    return text


def ground_truth(task: str, scene: SceneSpec, args: dict[str, str]) -> str:
    if task == "caption":
        return caption_for(scene)
    if task == "count":
        shape = COUNT_NOUNS[args["noun"]]
        n = sum(1 for o in scene.objects if shape is None or o.shape == shape)
        return NUMBER_WORDS[n]
    if task == "color":
        matches = [o.color for o in scene.objects if o.shape == args["shape"]]
        if len(matches) != 1:
            raise SceneError(f"colour question needs exactly one {args['shape']}")
        return matches[0]
    if task == "glyph_read":
        if not scene.glyph_text:
            raise SceneError("glyph question on a scene without text")
        return scene.glyph_text
    if task == "exist":
        hit = any(o.shape == args["shape"] and o.color == args["color"] for o in scene.objects)
        return "yes" if hit else "no"
    raise ConfigError(f"unknown task {task!r}")


def scene_code(scene: SceneSpec) -> str:
    """Compact textual scene description (cell index, colour, shape initial).

    Used as the text prefix when pre-training the language model so it learns
    to answer from context; never shown to the vision-language model.
    """
    toks = [f"{o.cell[0] * scene.cols + o.cell[1]}{o.color}{o.shape[0]}" for o in scene.sorted_objects()]
    if scene.glyph_text:
        toks.append("|" + scene.glyph_text)
    return " ".join(toks)


@dataclass(frozen=True)
class QAExample:
    id: str
    scene: SceneSpec
    instruction: str
    answer: str
    task_tag: str
    reference_short: str = ""
    split: str = "train"

    def __post_init__(self):
        if not self.instruction:
            raise ValueError("instruction must be non-empty")
        if not self.reference_short:
            object.__setattr__(self, "reference_short", self.answer)

    @property
    def image(self) -> np.ndarray:
        return render(self.scene)

    @property
    def scene_hash(self) -> str:
        return scene_hash(self.scene)

    def to_dict(self, inline_image: bool = False) -> dict:
        d = {
            "id": self.id,
            "scene": self.scene.to_dict(),
            "instruction": self.instruction,
            "answer": self.answer,
            "reference_short": self.reference_short,
            "task_tag": self.task_tag,
            "split": self.split,
        }
        if inline_image:
            d["image_ppm_b64"] = base64.b64encode(encode_ppm(render_uint8(self.scene))).decode("ascii")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "QAExample":
        return cls(d["id"], SceneSpec.from_dict(d["scene"]), d["instruction"], d["answer"],
                   d["task_tag"], d.get("reference_short", d["answer"]), d.get("split", "train"))


# -- generation --------------------------------------------------------------
@dataclass(frozen=True)
class GeneratorConfig:
    max_objects: int = 3
    glyph_prob: float = 0.5
    min_glyph_len: int = 1
    max_glyph_len: int = 3
    glyphs_enabled: bool = True
    rows: int = OBJECT_ROWS
    cols: int = IMAGE_SIZE // CELL


def _random_scene(rng: np.random.Generator, cfg: GeneratorConfig, seed: int, need_glyph: bool,
                  min_objects: int = 1) -> SceneSpec:
    n_cells = cfg.rows * cfg.cols
    n = int(rng.integers(min_objects, cfg.max_objects + 1))
    cells = rng.choice(n_cells, size=n, replace=False)
    colors = list(PALETTE)
    objs = tuple(
        SceneObject((int(c) // cfg.cols, int(c) % cfg.cols), SHAPES[int(rng.integers(3))],
                    colors[int(rng.integers(len(colors)))])
        for c in cells
    )
    glyph = None
    if cfg.glyphs_enabled and (need_glyph or rng.random() < cfg.glyph_prob):
        k = int(rng.integers(cfg.min_glyph_len, cfg.max_glyph_len + 1))
        glyph = "".join(GLYPH_ALPHABET[int(i)] for i in rng.integers(len(GLYPH_ALPHABET), size=k))
    return SceneSpec(cfg.rows, cfg.cols, objs, glyph, seed)


def make_example(seed: int, i: int, task: str, cfg: GeneratorConfig) -> QAExample:
    """Example ``i`` depends only on (seed, i, task, cfg)."""
    rng = np.random.default_rng([seed, i])
    scene_seed = int(rng.integers(2**31))
    scene = _random_scene(rng, cfg, scene_seed, need_glyph=task == "glyph_read")
    if task == "color":
        while not any(sum(o.shape == s for o in scene.objects) == 1 for s in SHAPES):
            scene = _random_scene(rng, cfg, scene_seed, need_glyph=False)
    args: dict[str, str] = {}
    if task == "count":
        args["noun"] = list(COUNT_NOUNS)[int(rng.integers(len(COUNT_NOUNS)))]
    elif task == "color":
        unique = [s for s in SHAPES if sum(o.shape == s for o in scene.objects) == 1]
        args["shape"] = unique[int(rng.integers(len(unique)))]
    elif task == "exist":
        if rng.random() < 0.5:
            o = scene.objects[int(rng.integers(len(scene.objects)))]
            args.update(color=o.color, shape=o.shape)
        else:
            args.update(color=list(PALETTE)[int(rng.integers(len(PALETTE)))], shape=SHAPES[int(rng.integers(3))])
    instruction = PARAPHRASES[task][0].format(**args)
    answer = ground_truth(task, scene, args)
    return QAExample(f"s{seed}-{i:06d}", scene, instruction, answer, task, answer)


def _check_mix(task_mix: dict[str, float], cfg: GeneratorConfig) -> tuple[list[str], np.ndarray]:
    unknown = set(task_mix) - set(TASKS)
    if unknown:
        raise ConfigError(f"unknown tasks in mix: {sorted(unknown)}")
    weights = np.array([float(task_mix.get(t, 0.0)) for t in TASKS])
    if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-9:
        raise ConfigError(f"task weights must be non-negative and sum to 1, got {task_mix}")
    if task_mix.get("glyph_read", 0.0) > 0 and not cfg.glyphs_enabled:
        raise ConfigError("glyph_read requested but glyph rendering is disabled")
    return list(TASKS), weights


def generate_dataset(size: int, task_mix: dict[str, float], seed: int,
                     config: GeneratorConfig = GeneratorConfig()) -> list[QAExample]:
    if size <= 0:
        raise ConfigError("dataset size must be positive")
    tasks, weights = _check_mix(task_mix, config)
    probs = weights / weights.sum()
    out = []
    for i in range(size):
        task = tasks[int(np.random.default_rng([seed, i, 99]).choice(len(tasks), p=probs))]
        out.append(make_example(seed, i, task, config))
    return out


def parse_task_mix(text: str) -> dict[str, float]:
    """``"count=0.5,color=0.5"`` -> dict."""
    mix = {}
    for item in filter(None, (s.strip() for s in text.split(","))):
        key, _, val = item.partition("=")
        try:
            mix[key.strip()] = float(val)
        except ValueError as exc:
            raise ConfigError(f"bad task-mix entry {item!r}") from exc
    return mix


# -- curation ----------------------------------------------------------------
class TemplateExpander:
    """Deterministic sentence templates for short answers."""

    def __call__(self, example: QAExample) -> str:
        tmpl = EXPANSIONS.get(example.task_tag)
        return tmpl.format(a=example.reference_short) if tmpl else example.answer


class CachedLLMExpander:
    """Expand answers through an external text client, falling back to templates."""

    PROMPT = ("Rewrite the short answer as one complete, natural sentence that keeps the answer "
              "word unchanged.\nQuestion: {q}\nShort answer: {a}\nSentence:")

    def __init__(self, client, fallback: TemplateExpander | None = None):
        self.client = client
        self.fallback = fallback or TemplateExpander()

    def __call__(self, example: QAExample) -> str:
        try:
            reply = self.client.complete(self.PROMPT.format(q=example.instruction, a=example.reference_short))
            reply = reply.strip()
            if not reply:
                raise ValueError("empty expansion")
            return reply
        except Exception as exc:  # noqa: BLE001 - any client failure falls back
            log.warning("expander failed for %s (%s); using template", example.id, exc)
            return self.fallback(example)


def is_expanded(example: QAExample) -> bool:
    return example.answer != example.reference_short


def augment_answer(example: QAExample, expander: Callable[[QAExample], str] | None = None) -> QAExample:
    """Replace a short answer by a full sentence; keeps ``reference_short``. Idempotent."""
    if is_expanded(example) or example.task_tag == "caption":
        return example
    expander = expander or TemplateExpander()
    return replace(example, answer=expander(example), reference_short=example.reference_short)


def dedupe_and_rephrase(dataset: Sequence[QAExample]) -> list[QAExample]:
    """Drop exact duplicates, then paraphrase instructions repeated across scenes."""
    seen_exact: set[tuple[str, str, str]] = set()
    unique: list[QAExample] = []
    for ex in dataset:
        key = (ex.instruction, ex.answer, ex.scene_hash)
        if key not in seen_exact:
            seen_exact.add(key)
            unique.append(ex)
    occurrences: dict[str, int] = {}
    out: list[QAExample] = []
    seen_pairs: set[tuple[str, str]] = set()
    for ex in unique:
        k = occurrences.get(ex.instruction, 0)
        occurrences[ex.instruction] = k + 1
        if k:
            try:
                base, args = parse_instruction(ex.task_tag, ex.instruction)
            except ValueError:
                base, args = None, None
            if base is not None:
                bank = PARAPHRASES[ex.task_tag]
                ex = replace(ex, instruction=bank[(base + k) % len(bank)].format(**args))
        pair = (ex.instruction, ex.scene_hash)
        if pair in seen_pairs:
            continue
        seen_pairs.add(pair)
        out.append(ex)
    return out


def split_dataset(dataset: Sequence[QAExample], ratios=(0.8, 0.1, 0.1), seed: int = 0):
    """Scene-disjoint train/val/test split with sizes close to ``ratios``."""
    if len(dataset) < 3:
        raise SplitError("need at least 3 examples to split")
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise SplitError(f"ratios must be three positive numbers summing to 1, got {ratios}")
    n = len(dataset)
    targets = [int(np.floor(r * n)) for r in ratios]
    for i in np.argsort([-(r * n - np.floor(r * n)) for r in ratios])[: n - sum(targets)]:
        targets[i] += 1
    groups: dict[str, list[int]] = {}
    for i, ex in enumerate(dataset):
        groups.setdefault(ex.scene_hash, []).append(i)
    keys = sorted(groups)
    order = np.random.default_rng([seed, 7]).permutation(len(keys))
    buckets: list[list[int]] = [[], [], []]
    for gi in order:
        idx = groups[keys[gi]]
        deficit = [targets[s] - len(buckets[s]) for s in range(3)]
        s = int(np.argmax(deficit))
        buckets[s].extend(idx)
    return tuple(
        [replace(dataset[i], split=SPLITS[s]) for i in sorted(buckets[s])] for s in range(3)
    )


# -- IO ----------------------------------------------------------------------
def encode_ppm(img: np.ndarray) -> bytes:
    img = np.asarray(img, dtype=np.uint8)
    H, W, _ = img.shape
    return f"P6\n{W} {H}\n255\n".encode("ascii") + img.tobytes()


def decode_ppm(blob: bytes) -> np.ndarray:
    """Binary PPM (P6, maxval 255) -> float image in [0, 1]."""
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(blob) and blob[pos: pos + 1].isspace():
            pos += 1
        if blob[pos: pos + 1] == b"#":
            while pos < len(blob) and blob[pos: pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos: pos + 1].isspace():
            pos += 1
        tokens.append(blob[start:pos])
    if tokens[0] != b"P6" or int(tokens[3]) != 255:
        raise ValueError("only binary P6 PPM with maxval 255 is supported")
    W, H = int(tokens[1]), int(tokens[2])
    data = np.frombuffer(blob[pos + 1: pos + 1 + W * H * 3], dtype=np.uint8)
    if data.size != W * H * 3:
        raise ValueError("truncated PPM payload")
    return data.reshape(H, W, 3).astype(np.float64) / 255.0


def read_ppm(path: str | Path) -> np.ndarray:
    return decode_ppm(Path(path).read_bytes())


def write_ppm(path: str | Path, img: np.ndarray) -> None:
    arr = np.asarray(img)
    if arr.dtype != np.uint8:
        arr = np.rint(np.clip(arr, 0, 1) * 255).astype(np.uint8)
    Path(path).write_bytes(encode_ppm(arr))


def write_jsonl(path: str | Path, examples: Iterable[QAExample], inline_images: bool = False) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(json.dumps(ex.to_dict(inline_images), sort_keys=True) + "\n")


def read_jsonl(path: str | Path) -> list[QAExample]:
    with open(path, encoding="utf-8") as fh:
        return [QAExample.from_dict(json.loads(line)) for line in fh if line.strip()]


def dataset_hash(examples: Iterable[QAExample]) -> str:
    h = hashlib.sha256()
    for ex in examples:
        h.update(json.dumps(ex.to_dict(), sort_keys=True).encode())
    return h.hexdigest()
