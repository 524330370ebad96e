"""Program vocabulary, prefix validation, tree parsing and program simulation.

A program is the prefix serialization of a tree of module applications rooted
at an ``answer`` module. Arity is fixed by module kind: find 0, transform 1,
and 2, answer 1.
"""

from __future__ import annotations

import enum
from collections.abc import Iterable, Iterator, Sequence
from dataclasses import dataclass
from typing import Any, Tuple

import numpy as np

from latentprog.exceptions import (
    GrammarError,
    ProgramParseError,
    ProgramStructureError,
    UnknownTokenError,
)
from latentprog.vocab import Vocabulary

COLORS = ("red", "green", "blue")
SHAPES = ("circle", "triangle", "square")
DIRECTIONS = ("left", "right", "above", "below")
MAX_PROGRAM_LEN = 7

Program = Tuple[str, ...]

__all__ = [
    "COLORS",
    "DIRECTIONS",
    "MAX_PROGRAM_LEN",
    "SHAPES",
    "ModuleKind",
    "Program",
    "ProgramNode",
    "ProgramVocab",
    "Verdict",
    "default_program_vocab",
    "enumerate_programs",
    "is_valid_program",
    "parse_to_tree",
    "passes_constraints",
    "serialize_tree",
    "simulate_program",
    "token_argument",
    "validate_prefix",
]


class ModuleKind(str, enum.Enum):
    FIND = "find"
    TRANSFORM = "transform"
    AND = "and"
    ANSWER = "answer"

    @property
    def arity(self) -> int:
        return _ARITY[self]


_ARITY = {
    ModuleKind.FIND: 0,
    ModuleKind.TRANSFORM: 1,
    ModuleKind.AND: 2,
    ModuleKind.ANSWER: 1,
}


def token_argument(token: str) -> str | None:
    """Return ``"red"`` for ``"find[red]"``; None for argument-free tokens."""
    if token.endswith("]") and "[" in token:
        return token[token.index("[") + 1 : -1]
    return None


class ProgramVocab(Vocabulary):
    """Program token vocabulary with a module kind per token.

    Args:
        entries: ``(token, kind)`` pairs in vocabulary order.
    """

    def __init__(self, entries: Iterable[tuple[str, ModuleKind | str]]):
        pairs = [(token, ModuleKind(kind)) for token, kind in entries]
        super().__init__(token for token, _ in pairs)
        self._kinds = dict(pairs)

    def kind(self, token: str, position: int = 1) -> ModuleKind:
        try:
            return self._kinds[token]
        except KeyError:
            raise UnknownTokenError(token, position) from None

    def arity(self, token: str, position: int = 1) -> int:
        return self.kind(token, position).arity

    def tokens_of(self, kind: ModuleKind) -> tuple[str, ...]:
        return tuple(t for t in self.tokens if self._kinds[t] is kind)

    def to_dict(self) -> dict[str, Any]:
        return {
            "tokens": [
                {"token": t, "kind": self._kinds[t].value, "arity": self.arity(t)}
                for t in self.tokens
            ]
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> ProgramVocab:
        return cls((entry["token"], entry["kind"]) for entry in data["tokens"])

    def _fingerprint_text(self) -> str:
        return "\n".join(f"{t}:{self._kinds[t].value}" for t in self.tokens)


def default_program_vocab() -> ProgramVocab:
    """The 12-token shapes-world vocabulary (6 find, 4 transform, and, answer)."""
    entries: list[tuple[str, ModuleKind]] = []
    entries += [(f"find[{c}]", ModuleKind.FIND) for c in COLORS]
    entries += [(f"find[{s}]", ModuleKind.FIND) for s in SHAPES]
    entries += [(f"transform[{d}]", ModuleKind.TRANSFORM) for d in DIRECTIONS]
    entries += [("and", ModuleKind.AND), ("answer", ModuleKind.ANSWER)]
    return ProgramVocab(entries)


@dataclass(frozen=True)
class Verdict:
    """Result of :func:`validate_prefix`.

    Attributes:
        valid: Whether the sequence is a single complete answer-rooted tree.
        position: 1-based position of the first offending token; for a
            sequence that ends with open child slots, ``len(tokens) + 1``.
        reason: Human-readable explanation (empty when valid).
    """

    valid: bool
    position: int | None = None
    reason: str = ""


def validate_prefix(tokens: Sequence[str], vocab: ProgramVocab) -> Verdict:
    """Check that ``tokens`` is the prefix serialization of one answer-rooted tree.

    Raises:
        UnknownTokenError: A token is not in ``vocab``.
    """
    kinds = [vocab.kind(token, position) for position, token in enumerate(tokens, 1)]
    needed = 1
    for position, kind in enumerate(kinds, 1):
        if needed == 0:
            message = f"tree completed before position {position}"
            return Verdict(False, position, message)
        needed = needed - 1 + kind.arity
    if needed != 0:
        return Verdict(
            False, len(tokens) + 1, f"{needed} child slot(s) still open at end"
        )
    if kinds[0] is not ModuleKind.ANSWER:
        return Verdict(False, 1, f"root must be an answer module, got {tokens[0]!r}")
    for position, kind in enumerate(kinds[1:], 2):
        if kind is ModuleKind.ANSWER:
            return Verdict(False, position, "answer module below the root")
    return Verdict(True)


def is_valid_program(tokens: Sequence[str], vocab: ProgramVocab) -> bool:
    """Validity check that treats unknown tokens as invalid instead of raising."""
    try:
        return validate_prefix(tokens, vocab).valid
    except UnknownTokenError:
        return False


@dataclass(frozen=True)
class ProgramNode:
    """One module application; ``children`` in serialization order."""

    token: str
    kind: ModuleKind
    children: tuple[ProgramNode, ...] = ()

    def __str__(self) -> str:
        if not self.children:
            return self.token
        return f"{self.token}{{ {', '.join(str(c) for c in self.children)} }}"

    def walk(self) -> Iterator[ProgramNode]:
        """Nodes in preorder."""
        yield self
        for child in self.children:
            yield from child.walk()


def parse_to_tree(tokens: Sequence[str], vocab: ProgramVocab) -> ProgramNode:
    """Parse a valid prefix serialization into its tree.

    Raises:
        ProgramParseError: The sequence fails :func:`validate_prefix`.
    """
    verdict = validate_prefix(tokens, vocab)
    if not verdict.valid:
        raise ProgramParseError(verdict)
    stream = iter(tokens)

    def build() -> ProgramNode:
        token = next(stream)
        kind = vocab.kind(token)
        children = tuple(build() for _ in range(kind.arity))
        return ProgramNode(token, kind, children)

    return build()


def serialize_tree(tree: ProgramNode) -> Program:
    """Preorder token emission; the inverse of :func:`parse_to_tree`.

    Raises:
        ProgramStructureError: Child count differs from the kind's arity, the
            root is not an answer module, or an answer module appears below it.
    """
    if tree.kind is not ModuleKind.ANSWER:
        raise ProgramStructureError(
            f"root must be an answer module, got {tree.token!r}"
        )
    tokens: list[str] = []
    for depth_first, node in enumerate(tree.walk()):
        if len(node.children) != node.kind.arity:
            raise ProgramStructureError(
                f"{node.token!r} has {len(node.children)} children, "
                f"arity is {node.kind.arity}"
            )
        if depth_first > 0 and node.kind is ModuleKind.ANSWER:
            raise ProgramStructureError("answer module below the root")
        tokens.append(node.token)
    return tuple(tokens)


def passes_constraints(tree: ProgramNode) -> bool:
    """Domain filter: no ``and`` over two identical find leaves."""
    for node in tree.walk():
        if node.kind is ModuleKind.AND:
            left, right = node.children
            if left.kind is ModuleKind.FIND and left == right:
                return False
    return True


def simulate_program(
    vocab: ProgramVocab,
    rng: np.random.Generator,
    max_len: int = MAX_PROGRAM_LEN,
    max_attempts: int = 1000,
) -> Program:
    """Sample a syntactically valid program in two stages.

    Stage one grows the sequence token by token, choosing uniformly among the
    tokens whose arity keeps every open child slot fillable within the
    remaining length. Stage two rejects programs that fail
    :func:`passes_constraints` and starts over.

    Raises:
        GrammarError: ``max_len < 2``, the vocabulary cannot build a program, or
            no acceptable program was found within ``max_attempts``.
    """
    if max_len < 2:
        raise GrammarError(f"max_len must be >= 2 to fit answer + find, got {max_len}")
    roots = vocab.tokens_of(ModuleKind.ANSWER)
    if not roots or not vocab.tokens_of(ModuleKind.FIND):
        raise GrammarError("vocabulary needs answer and find tokens to build programs")
    inner = [t for t in vocab.tokens if vocab.kind(t) is not ModuleKind.ANSWER]
    arities = np.array([vocab.arity(t) for t in inner])

    for _ in range(max_attempts):
        tokens = [roots[int(rng.integers(len(roots)))]]
        needed = 1
        while needed > 0:
            remaining = max_len - len(tokens)
            allowed = np.flatnonzero(needed - 1 + arities <= remaining - 1)
            choice = inner[int(allowed[int(rng.integers(len(allowed)))])]
            tokens.append(choice)
            needed = needed - 1 + vocab.arity(choice)
        program = tuple(tokens)
        if passes_constraints(parse_to_tree(program, vocab)):
            return program
    raise GrammarError(f"no program passed the constraints in {max_attempts} attempts")


def enumerate_programs(vocab: ProgramVocab, max_len: int) -> list[Program]:
    """Every valid program of length <= ``max_len``, in lexicographic id order."""
    results: list[Program] = []
    roots = vocab.tokens_of(ModuleKind.ANSWER)
    inner = [t for t in vocab.tokens if vocab.kind(t) is not ModuleKind.ANSWER]

    def grow(prefix: list[str], needed: int) -> None:
        if needed == 0:
            results.append(tuple(prefix))
            return
        for token in inner:
            new_needed = needed - 1 + vocab.arity(token)
            if len(prefix) + 1 + new_needed <= max_len:
                grow([*prefix, token], new_needed)

    for root in roots:
        if max_len >= 2:
            grow([root], 1)
    return results

