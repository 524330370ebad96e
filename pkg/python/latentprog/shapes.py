"""Synthetic shapes world: scenes, rendering, questions and the symbolic oracle.

A scene is a 3x3 grid whose cells are empty or hold one colored shape. Each
cell renders into its own 10x10 block of a 30x30 RGB image, so a 10x10,
stride-10 convolution sees exactly one cell per output position.
"""

from __future__ import annotations

import hashlib
import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field, replace
from typing import Any, Optional, Tuple

import numpy as np

from latentprog.exceptions import (
    ConfigurationError,
    ExecutionError,
    GrammarError,
    ProgramParseError,
)
from latentprog.grammar import (
    COLORS,
    DIRECTIONS,
    MAX_PROGRAM_LEN,
    SHAPES,
    ModuleKind,
    Program,
    ProgramNode,
    ProgramVocab,
    default_program_vocab,
    parse_to_tree,
    serialize_tree,
    simulate_program,
    token_argument,
)
from latentprog.vocab import Vocabulary

GRID = 3
CELL = 10
IMAGE_SIZE = GRID * CELL
MAX_QUESTION_LEN = 15
ANSWERS = ("yes", "no")

Cell = Optional[Tuple[str, str]]  # (shape, color) or empty

__all__ = [
    "ANSWERS",
    "DEFAULT_TEMPLATES",
    "GRID",
    "IMAGE_SIZE",
    "MAX_QUESTION_LEN",
    "QUESTION_WORDS",
    "DatasetSplit",
    "ExecutionResult",
    "QAItem",
    "QuestionTemplate",
    "Scene",
    "build_dataset",
    "generate_qa",
    "question_to_program",
    "question_vocab",
    "realize_question",
    "render_scene",
    "sample_scene",
    "symbolic_execute",
]

COLOR_RGB = {"red": (1.0, 0.0, 0.0), "green": (0.0, 1.0, 0.0), "blue": (0.0, 0.0, 1.0)}


def _shape_masks() -> dict[str, np.ndarray]:
    rows, cols = np.mgrid[0:CELL, 0:CELL]
    square = (rows >= 2) & (rows <= 7) & (cols >= 2) & (cols <= 7)
    circle = (rows - 4.5) ** 2 + (cols - 4.5) ** 2 <= 3.5**2
    half_width = (rows - 2) // 2
    triangle = (rows >= 2) & (rows <= 7) & (np.abs(cols - 4.5) <= half_width + 0.5)
    return {"circle": circle, "triangle": triangle, "square": square}


SHAPE_MASKS = _shape_masks()


@dataclass(frozen=True)
class Scene:
    """3x3 grid of cells, indexed ``cells[y][x]``.

    Coordinates are ``(x, y)``: ``x`` is the column counted from the left and
    ``y`` the row counted from the top.
    """

    cells: tuple[tuple[Cell, ...], ...]

    def __post_init__(self) -> None:
        if len(self.cells) != GRID or any(len(row) != GRID for row in self.cells):
            raise ConfigurationError(f"Scene must be {GRID}x{GRID}")
        for row in self.cells:
            for cell in row:
                if cell is None:
                    continue
                if cell[0] not in SHAPES or cell[1] not in COLORS:
                    raise ConfigurationError(f"Unknown shape/color in cell {cell}")
        if not any(cell is not None for row in self.cells for cell in row):
            raise ConfigurationError("Scene must have at least one nonempty cell")

    @classmethod
    def from_objects(cls, objects: Iterable[tuple[int, int, str, str]]) -> Scene:
        """Build from ``(x, y, shape, color)`` records."""
        grid: list[list[Cell]] = [[None] * GRID for _ in range(GRID)]
        for x, y, shape, color in objects:
            grid[y][x] = (shape, color)
        return cls(tuple(tuple(r) for r in grid))

    def objects(self) -> list[tuple[int, int, str, str]]:
        return [
            (x, y, cell[0], cell[1])
            for y, row in enumerate(self.cells)
            for x, cell in enumerate(row)
            if cell is not None
        ]

    def key(self) -> str:
        """Stable content hash used for split disjointness."""
        text = ";".join(f"{x},{y},{s},{c}" for x, y, s, c in self.objects())
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]

    def fill_fraction(self) -> float:
        return len(self.objects()) / (GRID * GRID)


def sample_scene(rng: np.random.Generator, density: float = 0.5) -> Scene:
    """Fill each cell independently with probability ``density``.

    Shapes and colors are uniform; an all-empty draw is resampled.
    """
    if not 0.0 < density <= 1.0:
        raise ConfigurationError(f"density must lie in (0, 1], got {density}")
    while True:
        grid: list[list[Cell]] = []
        for _ in range(GRID):
            row: list[Cell] = []
            for _ in range(GRID):
                if rng.random() < density:
                    shape = SHAPES[int(rng.integers(len(SHAPES)))]
                    color = COLORS[int(rng.integers(len(COLORS)))]
                    row.append((shape, color))
                else:
                    row.append(None)
            grid.append(row)
        if any(cell is not None for row in grid for cell in row):
            return Scene(tuple(tuple(r) for r in grid))


def render_scene(scene: Scene) -> np.ndarray:
    """Rasterize to a (30, 30, 3) float image in [0, 1] on a black background."""
    image = np.zeros((IMAGE_SIZE, IMAGE_SIZE, 3))
    for x, y, shape, color in scene.objects():
        block = image[y * CELL : (y + 1) * CELL, x * CELL : (x + 1) * CELL]
        block[SHAPE_MASKS[shape]] = COLOR_RGB[color]
    return image


@dataclass(frozen=True)
class ExecutionResult:
    """Oracle verdict plus each node's 3x3 boolean mask, in preorder."""

    answer: str
    masks: tuple[tuple[str, np.ndarray], ...]


def _shift(mask: np.ndarray, direction: str) -> np.ndarray:
    out = np.zeros_like(mask)
    if direction == "left":
        out[:, :-1] = mask[:, 1:]
    elif direction == "right":
        out[:, 1:] = mask[:, :-1]
    elif direction == "above":
        out[:-1, :] = mask[1:, :]
    elif direction == "below":
        out[1:, :] = mask[:-1, :]
    else:
        raise ExecutionError(f"Unknown direction {direction!r}")
    return out


def symbolic_execute(
    program: Sequence[str], scene: Scene, vocab: ProgramVocab
) -> ExecutionResult:
    """Execute ``program`` on ``scene`` with exact set semantics.

    find marks matching cells, transform shifts the mask one cell (cells that
    fall off vanish), and intersects, answer is "yes" iff the mask is nonempty.

    Raises:
        ExecutionError: The program is invalid or uses an unknown argument.
    """
    try:
        tree = parse_to_tree(program, vocab)
    except (ProgramParseError, GrammarError) as exc:
        raise ExecutionError(f"Cannot execute invalid program: {exc}") from exc

    color_grid = np.array([[c[1] if c else "" for c in row] for row in scene.cells])
    shape_grid = np.array([[c[0] if c else "" for c in row] for row in scene.cells])
    trace: list[tuple[str, np.ndarray]] = []

    def run(node: ProgramNode) -> np.ndarray:
        slot = len(trace)
        trace.append((node.token, np.zeros((GRID, GRID), dtype=bool)))
        argument = token_argument(node.token)
        if node.kind is ModuleKind.FIND:
            if argument in COLORS:
                mask = color_grid == argument
            elif argument in SHAPES:
                mask = shape_grid == argument
            else:
                raise ExecutionError(
                    f"find token without a known attribute: {node.token}"
                )
        elif node.kind is ModuleKind.TRANSFORM:
            mask = _shift(run(node.children[0]), argument or "")
        elif node.kind is ModuleKind.AND:
            mask = run(node.children[0]) & run(node.children[1])
        else:
            mask = run(node.children[0])
        trace[slot] = (node.token, mask)
        return mask

    final = run(tree)
    return ExecutionResult("yes" if final.any() else "no", tuple(trace))


# ---------------------------------------------------------------------------
# Question templates
# ---------------------------------------------------------------------------

_DIRECTION_WORDS = {
    "left": ("left", "of"),
    "right": ("right", "of"),
    "above": ("above",),
    "below": ("below",),
}


@dataclass(frozen=True)
class QuestionTemplate:
    """Surface frame around the noun phrase realized from the program."""

    template_id: int
    prefix: tuple[str, ...]
    suffix: tuple[str, ...] = ()


DEFAULT_TEMPLATES = (
    QuestionTemplate(0, ("is", "there", "a")),
    QuestionTemplate(1, ("is", "a"), ("present",)),
    QuestionTemplate(2, ("does", "the", "image", "contain", "a")),
)

QUESTION_WORDS = (
    "is", "there", "a", "present", "does", "the", "image", "contain",
    *COLORS, *SHAPES, "thing", "left", "right", "of", "above", "below",
    "both", "and",
)  # fmt: skip


def question_vocab() -> Vocabulary:
    return Vocabulary(QUESTION_WORDS)


def _noun_phrase(node: ProgramNode) -> list[str]:
    argument = token_argument(node.token)
    if node.kind is ModuleKind.FIND:
        return [argument, "thing"] if argument in COLORS else [argument or node.token]
    if node.kind is ModuleKind.TRANSFORM:
        direction = _DIRECTION_WORDS[argument or ""]
        return ["thing", *direction, *_noun_phrase(node.children[0])]
    if node.kind is ModuleKind.AND:
        left, right = node.children
        return ["both", *_noun_phrase(left), "and", *_noun_phrase(right)]
    raise GrammarError(f"answer module below the root: {node.token}")


def realize_question(
    program: Sequence[str], vocab: ProgramVocab, template: QuestionTemplate
) -> tuple[str, ...]:
    """Realize ``program`` as question words inside ``template``.

    Examples:
        >>> realize_question(("answer", "find[red]"), vocab, DEFAULT_TEMPLATES[0])
        ('is', 'there', 'a', 'red', 'thing')
    """
    tree = parse_to_tree(program, vocab)
    return (*template.prefix, *_noun_phrase(tree.children[0]), *template.suffix)


def question_to_program(
    words: Sequence[str],
    vocab: ProgramVocab,
    templates: Sequence[QuestionTemplate] = DEFAULT_TEMPLATES,
) -> tuple[Program, int]:
    """Invert :func:`realize_question`; returns ``(program, template_id)``.

    Raises:
        GrammarError: The words match no template or do not parse.
    """
    words = tuple(words)
    answer = vocab.tokens_of(ModuleKind.ANSWER)[0]
    for template in templates:
        head, tail = len(template.prefix), len(template.suffix)
        if words[:head] != template.prefix or len(words) <= head + tail:
            continue
        if tail and words[-tail:] != template.suffix:
            continue
        body = list(words[head : len(words) - tail])
        try:
            node, rest = _parse_phrase(body, vocab)
        except (IndexError, KeyError, GrammarError):
            continue
        if not rest:
            root = ProgramNode(answer, ModuleKind.ANSWER, (node,))
            return serialize_tree(root), template.template_id
    raise GrammarError(f"Question does not match any template: {' '.join(words)}")


def _parse_phrase(
    words: list[str], vocab: ProgramVocab
) -> tuple[ProgramNode, list[str]]:
    head, rest = words[0], words[1:]
    if head in COLORS:
        if rest[0] != "thing":
            raise GrammarError("color must be followed by 'thing'")
        token = f"find[{head}]"
        return ProgramNode(token, vocab.kind(token)), rest[1:]
    if head in SHAPES:
        token = f"find[{head}]"
        return ProgramNode(token, vocab.kind(token)), rest
    if head == "thing":
        direction = next((d for d in DIRECTIONS if rest[0] == d), None)
        if direction is None:
            raise GrammarError(f"expected a direction after 'thing', got {rest[0]!r}")
        phrase = _DIRECTION_WORDS[direction]
        if tuple(rest[: len(phrase)]) != phrase:
            raise GrammarError(f"expected {' '.join(phrase)!r}")
        rest = rest[len(phrase) :]
        child, rest = _parse_phrase(rest, vocab)
        token = f"transform[{direction}]"
        return ProgramNode(token, vocab.kind(token), (child,)), rest
    if head == "both":
        left, rest = _parse_phrase(rest, vocab)
        if rest[0] != "and":
            raise GrammarError("'both' phrase must continue with 'and'")
        right, rest = _parse_phrase(rest[1:], vocab)
        return ProgramNode("and", vocab.kind("and"), (left, right)), rest
    raise GrammarError(f"unexpected word {head!r}")


@dataclass(frozen=True)
class QAItem:
    """One question/answer pair over a scene; ``program`` is always stored, its
    visibility to training depends on ``teaching``."""

    item_id: int
    split: str
    scene_id: int
    question: tuple[str, ...]
    answer: str
    program: Program
    template_id: int = 0
    teaching: bool = False

    def to_record(self) -> dict[str, Any]:
        return {
            "id": self.item_id,
            "split": self.split,
            "scene_id": self.scene_id,
            "question": list(self.question),
            "answer": self.answer,
            "program": list(self.program),
            "template_id": self.template_id,
            "teaching": self.teaching,
        }

    @classmethod
    def from_record(cls, record: dict[str, Any]) -> QAItem:
        return cls(
            item_id=int(record["id"]),
            split=str(record["split"]),
            scene_id=int(record["scene_id"]),
            question=tuple(record["question"]),
            answer=str(record["answer"]),
            program=tuple(record["program"]),
            template_id=int(record.get("template_id", 0)),
            teaching=bool(record.get("teaching", False)),
        )


def generate_qa(
    scene: Scene,
    rng: np.random.Generator,
    vocab: ProgramVocab,
    templates: Sequence[QuestionTemplate] = DEFAULT_TEMPLATES,
    *,
    max_program_len: int = MAX_PROGRAM_LEN,
    max_question_len: int = MAX_QUESTION_LEN,
    balance: bool = True,
    max_attempts: int = 200,
    item_id: int = 0,
    scene_id: int = 0,
    split: str = "train",
) -> QAItem:
    """Sample a program, answer it with the oracle and realize its question.

    With ``balance`` a target answer is drawn by a fair coin and programs are
    resampled until the oracle agrees (falling back to the last candidate when
    ``max_attempts`` runs out). Programs whose question exceeds
    ``max_question_len`` words are always resampled.
    """
    if not templates:
        raise ConfigurationError("template set must not be empty")
    target = ANSWERS[int(rng.integers(2))]
    candidate: QAItem | None = None
    for _ in range(max_attempts):
        program = simulate_program(vocab, rng, max_program_len)
        template = templates[int(rng.integers(len(templates)))]
        words = realize_question(program, vocab, template)
        if len(words) > max_question_len:
            continue
        answer = symbolic_execute(program, scene, vocab).answer
        candidate = QAItem(
            item_id, split, scene_id, words, answer, program, template.template_id
        )
        if not balance or answer == target:
            return candidate
    if candidate is None:
        raise GrammarError(
            f"no program realized within {max_question_len} words "
            f"in {max_attempts} attempts"
        )
    return candidate


# ---------------------------------------------------------------------------
# Dataset
# ---------------------------------------------------------------------------

SPLIT_CODES = {"train": 0, "val": 1, "test": 2}


@dataclass
class DatasetSplit:
    """All generated scenes and items plus the generation metadata."""

    scenes: dict[int, Scene]
    items: list[QAItem]
    meta: dict[str, Any] = field(default_factory=dict)

    def split(self, name: str) -> list[QAItem]:
        return [item for item in self.items if item.split == name]

    @property
    def train(self) -> list[QAItem]:
        return self.split("train")

    @property
    def teaching(self) -> list[QAItem]:
        return [item for item in self.train if item.teaching]

    @property
    def vqa(self) -> list[QAItem]:
        return [item for item in self.train if not item.teaching]

    @property
    def val(self) -> list[QAItem]:
        return self.split("val")

    @property
    def test(self) -> list[QAItem]:
        return self.split("test")

    @property
    def supervision_fraction(self) -> float:
        train = self.train
        return len(self.teaching) / len(train) if train else 0.0

    def image(self, item: QAItem) -> np.ndarray:
        return render_scene(self.scenes[item.scene_id])

    def images(self, items: Sequence[QAItem]) -> np.ndarray:
        return np.stack([self.image(item) for item in items])


def teaching_count(fraction: float, train_size: int) -> int:
    return math.ceil(round(fraction * train_size, 9))


def build_dataset(
    *,
    train_size: int = 6000,
    val_size: int = 600,
    test_size: int = 600,
    supervision_fraction: float = 0.1,
    seed: int = 0,
    density: float = 0.5,
    vocab: ProgramVocab | None = None,
    templates: Sequence[QuestionTemplate] = DEFAULT_TEMPLATES,
    max_program_len: int = MAX_PROGRAM_LEN,
    max_question_len: int = MAX_QUESTION_LEN,
    balance: bool = True,
) -> DatasetSplit:
    """Generate train/val/test items and mark the teaching subset.

    Every item is a pure function of ``(seed, split, index)``. Validation and
    test scenes are resampled until their hash is absent from the training
    scenes. After a seeded shuffle of the training items the first
    ``ceil(fraction * train_size)`` become teaching items.
    """
    if min(train_size, val_size, test_size) < 1:
        raise ConfigurationError("split sizes must be >= 1")
    if not 0.0 < supervision_fraction <= 1.0:
        raise ConfigurationError(
            f"supervision_fraction must lie in (0, 1], got {supervision_fraction}"
        )
    vocab = vocab or default_program_vocab()
    scenes: dict[int, Scene] = {}
    items: list[QAItem] = []
    train_keys: set[str] = set()

    for split, size in (("train", train_size), ("val", val_size), ("test", test_size)):
        for index in range(size):
            rng = np.random.default_rng([seed, SPLIT_CODES[split], index])
            scene = sample_scene(rng, density)
            while split != "train" and scene.key() in train_keys:
                scene = sample_scene(rng, density)
            if split == "train":
                train_keys.add(scene.key())
            scene_id = len(scenes)
            scenes[scene_id] = scene
            items.append(
                generate_qa(
                    scene,
                    rng,
                    vocab,
                    templates,
                    max_program_len=max_program_len,
                    max_question_len=max_question_len,
                    balance=balance,
                    item_id=len(items),
                    scene_id=scene_id,
                    split=split,
                )
            )

    order = np.random.default_rng([seed, 99]).permutation(train_size)
    chosen = {int(i) for i in order[: teaching_count(supervision_fraction, train_size)]}
    items = [replace(item, teaching=item.item_id in chosen) for item in items]

    meta = {
        "seed": seed,
        "sizes": {"train": train_size, "val": val_size, "test": test_size},
        "supervision_fraction": supervision_fraction,
        "density": density,
        "teaching_count": len(chosen),
        "program_vocab": vocab.to_dict(),
        "question_vocab": list(QUESTION_WORDS),
        "answers": list(ANSWERS),
        "templates": [
            {"id": t.template_id, "prefix": list(t.prefix), "suffix": list(t.suffix)}
            for t in templates
        ],
    }
    return DatasetSplit(scenes, items, meta)
