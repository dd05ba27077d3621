"""Synthetic scenes, captions, edit pairs and a programmatic image checker.

A scene places 1-3 coloured shapes on a 4x4 grid of 8x8 cells over a black
32x32 canvas. Captions are token sequences over a 32-token vocabulary:

    BOS  color shape at row col  [and  color shape at row col]*  EOS

with objects in canonical (row, col) order, so scene <-> caption is a
bijection.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

IMAGE_SIZE = 32
GRID = 4
CELL = IMAGE_SIZE // GRID

COLORS = ("red", "green", "blue")
SHAPES = ("square", "circle", "triangle")
COLOR_RGB = {
    "black": (0.0, 0.0, 0.0),
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
}
SHAPE_THRESHOLD = 0.6

VOCAB = (
    "<pad>", "<bos>", "<eos>", "<boi>", "<eoi>",
    "red", "green", "blue", "square", "circle", "triangle",
    "0", "1", "2", "3", "at", "and",
    "recolor", "move", "remove", "add", "keep", "to",
    "<t2i>", "<i2t>", "<edit>",
    "<r0>", "<r1>", "<r2>", "<r3>", "<r4>", "<r5>",
)
VOCAB_SIZE = len(VOCAB)
TOK = {w: i for i, w in enumerate(VOCAB)}
PAD, BOS, EOS, BOI, EOI = (TOK[w] for w in ("<pad>", "<bos>", "<eos>", "<boi>", "<eoi>"))
MAX_OBJECTS = 3
MAX_CAPTION_LEN = 2 + 5 * MAX_OBJECTS + (MAX_OBJECTS - 1)  # 19
MAX_INSTRUCTION_LEN = 6
EDIT_KINDS = ("recolor", "move", "remove", "add")


class CaptionError(ValueError):
    """Token sequence is not a well-formed caption or instruction."""


@dataclass(frozen=True, order=True)
class Obj:
    row: int
    col: int
    shape: str
    color: str


@dataclass(frozen=True)
class Scene:
    objects: tuple[Obj, ...]

    @staticmethod
    def of(objects) -> "Scene":
        objs = tuple(sorted(objects, key=lambda o: (o.row, o.col)))
        cells = [(o.row, o.col) for o in objs]
        if len(set(cells)) != len(cells):
            raise ValueError(f"two objects share a cell: {cells}")
        return Scene(objs)

    def cells(self) -> set[tuple[int, int]]:
        return {(o.row, o.col) for o in self.objects}

    def to_json(self) -> list:
        return [[o.shape, o.color, o.row, o.col] for o in self.objects]

    @staticmethod
    def from_json(items) -> "Scene":
        return Scene.of(Obj(int(r), int(c), s, col) for s, col, r, c in items)


@dataclass(frozen=True)
class EditPair:
    source: Scene
    instruction: tuple[int, ...]
    target: Scene
    kind: str


# -- shape templates ---------------------------------------------------------

def _templates() -> dict[str, np.ndarray]:
    yy, xx = np.mgrid[0:CELL, 0:CELL] + 0.5
    square = np.zeros((CELL, CELL))
    square[0:7, 0:7] = 1.0
    circle = ((yy - 4) ** 2 + (xx - 4) ** 2 <= 2.6**2).astype(float)
    triangle = np.zeros((CELL, CELL))
    for r in range(CELL):
        triangle[r] = (np.abs(xx[r] - 4) < 0.5 * (r + 1)).astype(float)
    return {"square": square, "circle": circle, "triangle": triangle}


TEMPLATES = _templates()


def render(scene: Scene) -> np.ndarray:
    """Channel-last float image in [0, 1]."""
    img = np.zeros((IMAGE_SIZE, IMAGE_SIZE, 3))
    for o in scene.objects:
        mask = TEMPLATES[o.shape]
        cell = img[o.row * CELL:(o.row + 1) * CELL, o.col * CELL:(o.col + 1) * CELL]
        cell[mask > 0] = COLOR_RGB[o.color]
    return img


# -- captions ----------------------------------------------------------------

def caption(scene: Scene) -> list[int]:
    toks = [BOS]
    for i, o in enumerate(scene.objects):
        if i:
            toks.append(TOK["and"])
        toks += [TOK[o.color], TOK[o.shape], TOK["at"], TOK[str(o.row)], TOK[str(o.col)]]
    toks.append(EOS)
    return toks


def pad(tokens, length: int) -> list[int]:
    if len(tokens) > length:
        raise CaptionError(f"sequence of {len(tokens)} tokens exceeds {length}")
    return list(tokens) + [PAD] * (length - len(tokens))


def _digit(tok: int) -> int:
    word = VOCAB[tok]
    if word not in ("0", "1", "2", "3"):
        raise CaptionError(f"expected grid index, got '{word}'")
    return int(word)


def parse_caption(tokens) -> Scene:
    toks = [int(t) for t in tokens]
    while toks and toks[-1] == PAD:
        toks.pop()
    if len(toks) < 2 or toks[0] != BOS or toks[-1] != EOS:
        raise CaptionError("caption must be BOS ... EOS")
    body = toks[1:-1]
    objects = []
    i = 0
    while i < len(body):
        if objects:
            if body[i] != TOK["and"]:
                raise CaptionError("objects must be joined by 'and'")
            i += 1
        chunk = body[i:i + 5]
        if len(chunk) != 5:
            raise CaptionError("truncated object phrase")
        color, shape, at = VOCAB[chunk[0]], VOCAB[chunk[1]], VOCAB[chunk[2]]
        if color not in COLORS or shape not in SHAPES or at != "at":
            raise CaptionError(f"bad object phrase {[VOCAB[t] for t in chunk]}")
        objects.append(Obj(_digit(chunk[3]), _digit(chunk[4]), shape, color))
        i += 5
    if len(objects) > MAX_OBJECTS:
        raise CaptionError("too many objects")
    try:
        return Scene.of(objects)
    except ValueError as exc:
        raise CaptionError(str(exc)) from None


def detokenize(tokens) -> str:
    return " ".join(VOCAB[int(t)] for t in tokens if int(t) != PAD)


def tokenize(text: str) -> list[int]:
    try:
        return [TOK[w] for w in text.split()]
    except KeyError as exc:
        raise CaptionError(f"unknown token {exc}") from None


def prompt_tokens(words: str) -> list[int]:
    """Caption tokens from object phrases, e.g. 'red square at 0 0'."""
    words = words.strip()
    toks = tokenize(words)
    if not toks or toks[0] != BOS:
        toks = [BOS] + toks + [EOS]
    parse_caption(toks)
    return toks


# -- checker -----------------------------------------------------------------

def _nearest_color(rgb: np.ndarray) -> str:
    names = list(COLOR_RGB)
    dists = [np.linalg.norm(rgb - np.asarray(COLOR_RGB[n])) for n in names]
    return names[int(np.argmin(dists))]


def _correlation(a: np.ndarray, b: np.ndarray) -> float:
    a = a.ravel() - a.mean()
    b = b.ravel() - b.mean()
    denom = np.sqrt((a * a).sum() * (b * b).sum())
    return float((a * b).sum() / denom) if denom > 1e-12 else 0.0


def object_found(image: np.ndarray, obj: Obj) -> bool:
    cell = image[obj.row * CELL:(obj.row + 1) * CELL, obj.col * CELL:(obj.col + 1) * CELL]
    centre = cell[2:6, 2:6].reshape(-1, 3).mean(axis=0)
    if _nearest_color(centre) != obj.color:
        return False
    intensity = cell @ np.asarray(COLOR_RGB[obj.color])
    return _correlation(intensity, TEMPLATES[obj.shape]) > SHAPE_THRESHOLD


def check_image(image: np.ndarray, tokens) -> float:
    """Fraction of captioned objects present in the image.

    An empty caption (BOS EOS) scores 1.0.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.shape != (IMAGE_SIZE, IMAGE_SIZE, 3):
        raise ValueError(f"image must be {IMAGE_SIZE}x{IMAGE_SIZE}x3, got {image.shape}")
    scene = parse_caption(tokens)
    if not scene.objects:
        return 1.0
    return sum(object_found(image, o) for o in scene.objects) / len(scene.objects)


# -- corpus ------------------------------------------------------------------

def split_of(scene: Scene) -> str:
    """Deterministic prompt-level split: about 20% of captions are held out."""
    digest = hashlib.sha256(bytes(caption(scene))).digest()
    return "val" if digest[0] % 5 == 0 else "train"


def random_scene(rng: np.random.Generator, n_objects: int | None = None,
                 probs=(0.5, 0.3, 0.2)) -> Scene:
    if n_objects is None:
        n_objects = int(rng.choice([1, 2, 3], p=probs))
    cells = rng.choice(GRID * GRID, size=n_objects, replace=False)
    return Scene.of(
        Obj(int(c) // GRID, int(c) % GRID, SHAPES[rng.integers(3)], COLORS[rng.integers(3)])
        for c in cells
    )


def _split_seed(seed: int, split: str) -> int:
    return int.from_bytes(hashlib.sha256(f"{seed}:{split}".encode()).digest()[:8], "little")


def generate_corpus(seed: int, count: int, split: str = "train",
                    n_objects: int | None = None) -> list[tuple[Scene, list[int]]]:
    """``count`` (scene, caption) samples whose captions all belong to ``split``."""
    if count < 1:
        raise ValueError("count must be >= 1")
    if split not in ("train", "val"):
        raise ValueError(f"unknown split '{split}'")
    rng = np.random.default_rng(_split_seed(seed, split))
    out = []
    while len(out) < count:
        scene = random_scene(rng, n_objects)
        if split_of(scene) == split:
            out.append((scene, caption(scene)))
    return out


def single_object_scenes(split: str | None = None) -> list[Scene]:
    """All 144 single-object scenes, optionally restricted to one split."""
    scenes = [Scene.of([Obj(r, c, s, col)]) for r in range(GRID) for c in range(GRID)
              for s in SHAPES for col in COLORS]
    return [s for s in scenes if split is None or split_of(s) == split]


def class_scenes(seed: int, classes: list[tuple[str, str]], per_class: int) -> tuple[list[Scene], np.ndarray]:
    """Scenes whose 1-3 objects all share one (color, shape) class."""
    rng = np.random.default_rng(seed)
    scenes, labels = [], []
    for label, (color, shape) in enumerate(classes):
        for _ in range(per_class):
            k = int(rng.integers(1, MAX_OBJECTS + 1))
            cells = rng.choice(GRID * GRID, size=k, replace=False)
            scenes.append(Scene.of(Obj(int(c) // GRID, int(c) % GRID, shape, color) for c in cells))
            labels.append(label)
    return scenes, np.asarray(labels)


ALL_CLASSES = [(c, s) for c in COLORS for s in SHAPES]


# -- edits -------------------------------------------------------------------

def _loc(o: Obj) -> list[int]:
    return [TOK[str(o.row)], TOK[str(o.col)]]


def apply_instruction(source: Scene, instruction) -> Scene:
    toks = [int(t) for t in instruction if int(t) != PAD]
    if not toks:
        raise CaptionError("empty instruction")
    verb = VOCAB[toks[0]]
    objs = {(o.row, o.col): o for o in source.objects}
    if verb == "keep":
        return source
    if verb == "add":
        if len(toks) != 6 or VOCAB[toks[3]] != "at":
            raise CaptionError("add expects: add color shape at row col")
        cell = (_digit(toks[4]), _digit(toks[5]))
        if cell in objs:
            raise CaptionError("add targets an occupied cell")
        objs[cell] = Obj(*cell, VOCAB[toks[2]], VOCAB[toks[1]])
        return Scene.of(objs.values())
    if len(toks) < 3:
        raise CaptionError("instruction missing a location")
    cell = (_digit(toks[1]), _digit(toks[2]))
    if cell not in objs:
        raise CaptionError(f"no object at {cell}")
    o = objs.pop(cell)
    if verb == "remove":
        return Scene.of(objs.values())
    if verb == "recolor":
        objs[cell] = replace(o, color=VOCAB[toks[3]])
        return Scene.of(objs.values())
    if verb == "move":
        dest = (_digit(toks[4]), _digit(toks[5]))
        if dest in objs:
            raise CaptionError("move targets an occupied cell")
        objs[dest] = replace(o, row=dest[0], col=dest[1])
        return Scene.of(objs.values())
    raise CaptionError(f"unknown edit verb '{verb}'")


def _make_instruction(rng: np.random.Generator, source: Scene, kind: str) -> list[int]:
    if kind == "keep":
        return [TOK["keep"]]
    free = sorted(set(range(GRID * GRID)) - {r * GRID + c for r, c in source.cells()})
    if kind == "add":
        cell = int(rng.choice(free))
        return [TOK["add"], TOK[COLORS[rng.integers(3)]], TOK[SHAPES[rng.integers(3)]], TOK["at"],
                TOK[str(cell // GRID)], TOK[str(cell % GRID)]]
    o = source.objects[int(rng.integers(len(source.objects)))]
    if kind == "remove":
        return [TOK["remove"], *_loc(o)]
    if kind == "recolor":
        new = [c for c in COLORS if c != o.color][int(rng.integers(2))]
        return [TOK["recolor"], *_loc(o), TOK[new]]
    if kind == "move":
        cell = int(rng.choice(free))
        return [TOK["move"], *_loc(o), TOK["to"], TOK[str(cell // GRID)], TOK[str(cell % GRID)]]
    raise ValueError(f"unknown edit kind '{kind}'")


def make_edit_pairs(seed: int, count: int, split: str = "train", kinds=EDIT_KINDS,
                    max_objects: int = 2) -> list[EditPair]:
    """Edit pairs on sources with 1..max_objects objects; kinds drawn uniformly.

    The split is decided by the source caption, so held-out pairs never share
    a source scene with training pairs.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(_split_seed(seed, "edit-" + split))
    probs = np.ones(max_objects) / max_objects
    out = []
    while len(out) < count:
        source = random_scene(rng, int(rng.choice(np.arange(1, max_objects + 1), p=probs)))
        if split_of(source) != split:
            continue
        kind = str(kinds[int(rng.integers(len(kinds)))])
        if kind == "add" and len(source.objects) >= MAX_OBJECTS:
            continue
        instr = _make_instruction(rng, source, kind)
        out.append(EditPair(source, tuple(instr), apply_instruction(source, instr), kind))
    return out


# -- export ------------------------------------------------------------------

def export_corpus(directory, seed: int, count: int) -> list[Path]:
    """Write one JSONL file per split; images are re-rendered on load."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for split in ("train", "val"):
        path = directory / f"{split}.jsonl"
        with path.open("w") as fh:
            for scene, toks in generate_corpus(seed, count, split):
                fh.write(json.dumps({"scene": scene.to_json(), "tokens": toks}) + "\n")
        paths.append(path)
    return paths


def load_corpus(path) -> list[tuple[Scene, list[int]]]:
    out = []
    with Path(path).open() as fh:
        for line in fh:
            rec = json.loads(line)
            out.append((Scene.from_json(rec["scene"]), list(rec["tokens"])))
    return out
