"""Neural module network answerer p(a | image; theta_z).

A CNN stem maps each 30x30 image to a 3x3 grid of feature vectors; one small
module per program token is applied bottom-up along the program tree:

    find       features -> attention
    transform  attention x features -> attention (dense 9x9 cell mixing)
    and        attention x attention -> attention (elementwise min)
    answer     attention x features -> log-probabilities over ANSWERS

Attention maps are sigmoid-gated, so they stay inside [0, 1].
"""

from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from latentprog.autodiff import (
    Tensor,
    add,
    conv2d,
    log_softmax,
    matmul,
    minimum,
    nll,
    relu,
    reshape,
    scale,
    sigmoid,
)
from latentprog.exceptions import (
    ConfigurationError,
    ExecutionError,
    GrammarError,
    ShapeError,
)
from latentprog.grammar import (
    COLORS,
    SHAPES,
    ModuleKind,
    ProgramNode,
    ProgramVocab,
    parse_to_tree,
    token_argument,
)
from latentprog.shapes import ANSWERS, CELL, GRID, IMAGE_SIZE, SHAPE_MASKS

logger = logging.getLogger(__name__)

CELLS = GRID * GRID
CHANNELS = 64

__all__ = [
    "CELLS",
    "CHANNELS",
    "CnnStem",
    "ExecutionTrace",
    "ModuleBank",
    "NeuralModule",
    "answer_log_prob",
    "encode_image",
    "execute_program",
    "rig_oracle_executor",
    "run_module",
]


def _init(
    rng: np.random.Generator | None, shape: tuple[int, ...], fan_in: int
) -> np.ndarray:
    if rng is None:
        return np.zeros(shape)
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class CnnStem:
    """10x10 stride-10 conv then 1x1 conv, ReLU after each.

    Args:
        channels: Output channels of both layers.
        rng: Initialization stream; ``None`` means all-zero weights.
    """

    def __init__(
        self, channels: int = CHANNELS, rng: np.random.Generator | None = None
    ):
        if channels < 1:
            raise ConfigurationError(f"channels must be >= 1, got {channels}")
        self.channels = channels
        kernel = _init(rng, (CELL, CELL, 3, channels), CELL * CELL * 3)
        self.conv1 = Tensor(kernel, True, "stem.conv1.kernel")
        self.bias1 = Tensor(np.zeros(channels), True, "stem.conv1.bias")
        self.conv2 = Tensor(
            _init(rng, (1, 1, channels, channels), channels), True, "stem.conv2.kernel"
        )
        self.bias2 = Tensor(np.zeros(channels), True, "stem.conv2.bias")

    def parameters(self) -> dict[str, Tensor]:
        tensors = (self.conv1, self.bias1, self.conv2, self.bias2)
        return {t.name or "": t for t in tensors}


def encode_image(stem: CnnStem, images: np.ndarray) -> Tensor:
    """Feature grid (B, 9, C) for a batch (B, 30, 30, 3) or one (30, 30, 3) image.

    Raises:
        ShapeError: Wrong image shape.
        ExecutionError: Pixel values outside [0, 1].
    """
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    if images.ndim != 4 or images.shape[1:] != (IMAGE_SIZE, IMAGE_SIZE, 3):
        raise ShapeError(
            f"encode_image: expected (B, {IMAGE_SIZE}, {IMAGE_SIZE}, 3), "
            f"got {images.shape}"
        )
    if images.size and (images.min() < 0.0 or images.max() > 1.0):
        raise ExecutionError("encode_image: pixel values must lie in [0, 1]")
    hidden = relu(add(conv2d(Tensor(images), stem.conv1, stride=CELL), stem.bias1))
    features = relu(add(conv2d(hidden, stem.conv2, stride=1), stem.bias2))
    return reshape(features, (images.shape[0], CELLS, stem.channels))


@dataclass
class NeuralModule:
    """Parameters of the module bound to one program token."""

    token: str
    kind: ModuleKind
    params: dict[str, Tensor] = field(default_factory=dict)


class ModuleBank:
    """One :class:`NeuralModule` per content token of ``vocab``.

    Args:
        vocab: Program vocabulary.
        channels: Feature width produced by the stem.
        rng: Initialization stream; ``None`` means all-zero weights.
    """

    def __init__(
        self,
        vocab: ProgramVocab,
        channels: int = CHANNELS,
        rng: np.random.Generator | None = None,
    ):
        self.vocab = vocab
        self.channels = channels
        self.modules: dict[str, NeuralModule] = {}
        for token in vocab.tokens:
            kind = vocab.kind(token)
            prefix = f"bank.{token}"
            params: dict[str, Tensor] = {}

            def param(name: str, data: np.ndarray) -> None:
                params[name] = Tensor(data, True, f"{prefix}.{name}")

            if kind is ModuleKind.FIND:
                param("weight", _init(rng, (channels, 1), channels))
                param("bias", np.zeros(1))
            elif kind is ModuleKind.TRANSFORM:
                param("mix", _init(rng, (CELLS, CELLS), CELLS))
                param("weight", _init(rng, (channels, 1), channels))
                param("bias", np.zeros(CELLS))
            elif kind is ModuleKind.ANSWER:
                param("weight", _init(rng, (channels, len(ANSWERS)), channels))
                param("bias", np.zeros(len(ANSWERS)))
            self.modules[token] = NeuralModule(token, kind, params)

    def __getitem__(self, token: str) -> NeuralModule:
        try:
            return self.modules[token]
        except KeyError:
            raise ExecutionError(f"No module for token {token!r}") from None

    def parameters(self) -> dict[str, Tensor]:
        return {
            param.name or "": param
            for module in self.modules.values()
            for param in module.params.values()
        }

    def parameters_for(self, tokens: Sequence[str]) -> dict[str, Tensor]:
        """Parameters of the modules named by ``tokens`` only."""
        return {
            param.name or "": param
            for token in dict.fromkeys(tokens)
            for param in self[token].params.values()
        }


def run_module(
    bank: ModuleBank, token: str, features: Tensor, *inputs: Tensor
) -> Tensor:
    """Apply the module for ``token`` to (B, 9, C) features and child outputs."""
    module = bank[token]
    batch = features.shape[0]
    p = module.params
    if len(inputs) != module.kind.arity:
        raise ExecutionError(
            f"{token!r} expects {module.kind.arity} inputs, got {len(inputs)}"
        )
    if module.kind is ModuleKind.FIND:
        scores = add(matmul(features, p["weight"]), p["bias"])
        return sigmoid(reshape(scores, (batch, CELLS)))
    if module.kind is ModuleKind.TRANSFORM:
        local = reshape(matmul(features, p["weight"]), (batch, CELLS))
        return sigmoid(add(add(matmul(inputs[0], p["mix"]), local), p["bias"]))
    if module.kind is ModuleKind.AND:
        return minimum(inputs[0], inputs[1])
    pooled = matmul(reshape(inputs[0], (batch, 1, CELLS)), features)
    flat = reshape(pooled, (batch, features.shape[2]))
    logits = add(matmul(flat, p["weight"]), p["bias"])
    return log_softmax(logits)


@dataclass
class ExecutionTrace:
    """Per-node outputs in preorder plus the answer log-probabilities.

    ``outputs[i]`` is the tensor produced by ``tokens[i]``; the root's output
    is the (B, |ANSWERS|) log-probability table.
    """

    tokens: list[str]
    outputs: list[Tensor]

    @property
    def log_probs(self) -> np.ndarray:
        return self.outputs[0].data

    def attentions(self) -> list[tuple[str, np.ndarray]]:
        """(token, (B, 3, 3) map) for every non-root node."""
        batch = self.outputs[0].shape[0]
        return [
            (token, out.data.reshape(batch, GRID, GRID))
            for token, out in zip(self.tokens[1:], self.outputs[1:])
        ]

    def answers(self) -> list[str]:
        """Argmax answer per row; ties go to the earlier answer."""
        return [ANSWERS[int(i)] for i in np.argmax(self.log_probs, axis=1)]


def execute_program(
    bank: ModuleBank,
    stem: CnnStem,
    program: Sequence[str],
    images: np.ndarray | None = None,
    *,
    features: Tensor | None = None,
) -> tuple[Tensor, ExecutionTrace]:
    """Run ``program`` on a batch of images that share it.

    Pass precomputed ``features`` to skip the stem.

    Raises:
        ExecutionError: Invalid program or a token without a module.
    """
    try:
        tree = parse_to_tree(program, bank.vocab)
    except GrammarError as exc:
        text = " ".join(program)
        raise ExecutionError(f"Cannot execute program {text!r}: {exc}") from exc
    if features is None:
        if images is None:
            raise ConfigurationError("execute_program needs images or features")
        features = encode_image(stem, images)
    tokens: list[str] = []
    outputs: list[Tensor] = []

    def run(node: ProgramNode) -> Tensor:
        slot = len(outputs)
        tokens.append(node.token)
        outputs.append(features)
        children = [run(c) for c in node.children]
        result = run_module(bank, node.token, features, *children)
        outputs[slot] = result
        return result

    log_probs = run(tree)
    return log_probs, ExecutionTrace(tokens, outputs)


def answer_log_prob(
    bank: ModuleBank,
    stem: CnnStem,
    program: Sequence[str],
    images: np.ndarray | None,
    answers: Sequence[str],
    *,
    features: Tensor | None = None,
) -> Tensor:
    """log p(answer | image; theta_program) per row (B,)."""
    try:
        targets = np.array([ANSWERS.index(a) for a in answers], dtype=np.int64)
    except ValueError as exc:
        raise ExecutionError(
            f"Unknown answer in {list(answers)}; expected {ANSWERS}"
        ) from exc
    log_probs, _ = execute_program(bank, stem, program, images, features=features)
    return scale(nll(log_probs, targets), -1.0)


_SHIFT_SOURCE = {
    "left": (0, 1),
    "right": (0, -1),
    "above": (1, 0),
    "below": (-1, 0),
}


def rig_oracle_executor(
    stem: CnnStem, bank: ModuleBank, vocab: ProgramVocab, sharpness: float = 40.0
) -> None:
    """Overwrite stem and bank weights so execution reproduces the symbolic oracle.

    Stem channels 0-2 indicate the cell color, 3-5 the shape, 6 is constant 1.
    find thresholds its indicator, transform shifts the attention grid, and
    answer says "yes" when the attention mass exceeds one half.
    """
    if stem.channels < 7 or bank.channels != stem.channels:
        raise ConfigurationError(
            "oracle rigging needs >= 7 matching stem/bank channels"
        )
    masks = np.stack([SHAPE_MASKS[s].reshape(-1).astype(float) for s in SHAPES])
    solve = np.linalg.pinv(masks)  # (100, 3); masks @ solve == I
    any_shape = (solve @ np.ones(len(SHAPES))).reshape(CELL, CELL)

    kernel = np.zeros_like(stem.conv1.data)
    for index, _color in enumerate(COLORS):
        kernel[:, :, index, index] = any_shape
    for index in range(len(SHAPES)):
        for color in range(3):
            kernel[:, :, color, 3 + index] = solve[:, index].reshape(CELL, CELL)
    bias = np.zeros(stem.channels)
    bias[6] = 1.0
    stem.conv1.data = kernel
    stem.bias1.data = bias
    stem.conv2.data = np.eye(stem.channels).reshape(1, 1, stem.channels, stem.channels)
    stem.bias2.data = np.zeros(stem.channels)

    k = sharpness
    for token, module in bank.modules.items():
        argument = token_argument(token)
        p = module.params
        if module.kind is ModuleKind.FIND:
            if argument in COLORS:
                channel = COLORS.index(argument)
            else:
                channel = len(COLORS) + SHAPES.index(argument or "")
            weight = np.zeros((bank.channels, 1))
            weight[channel, 0] = k
            p["weight"].data = weight
            p["bias"].data = np.array([-k / 2.0])
        elif module.kind is ModuleKind.TRANSFORM:
            dr, dc = _SHIFT_SOURCE[argument or ""]
            mix = np.zeros((CELLS, CELLS))
            for row in range(GRID):
                for col in range(GRID):
                    src_r, src_c = row + dr, col + dc
                    if 0 <= src_r < GRID and 0 <= src_c < GRID:
                        mix[src_r * GRID + src_c, row * GRID + col] = k
            p["mix"].data = mix
            p["weight"].data = np.zeros((bank.channels, 1))
            p["bias"].data = np.full(CELLS, -k / 2.0)
        elif module.kind is ModuleKind.ANSWER:
            weight = np.zeros((bank.channels, len(ANSWERS)))
            weight[6, 0] = k
            p["weight"].data = weight
            p["bias"].data = np.array([-k / 2.0, 0.0])
    logger.debug("rigged %d modules to the symbolic oracle", len(bank.modules))
