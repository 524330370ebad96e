"""
Hypothesis strategies for programs, scenes and token sequences.

Provides generators for property-based testing of the grammar, the shapes
world and the sequence models.
"""

import numpy as np
from hypothesis import strategies as st

from latentprog.grammar import (
    COLORS,
    DIRECTIONS,
    SHAPES,
    ModuleKind,
    ProgramNode,
    default_program_vocab,
    serialize_tree,
)
from latentprog.shapes import GRID, Scene

PROGRAM_VOCAB = default_program_vocab()

FIND_TOKENS = [f"find[{a}]" for a in COLORS + SHAPES]
TRANSFORM_TOKENS = [f"transform[{d}]" for d in DIRECTIONS]


def _leaf(token):
    return ProgramNode(token, ModuleKind.FIND)


def _attention_trees(max_leaves):
    """Recursive attention subtrees (find / transform / and)."""
    return st.recursive(
        st.sampled_from(FIND_TOKENS).map(_leaf),
        lambda children: st.one_of(
            st.tuples(st.sampled_from(TRANSFORM_TOKENS), children).map(
                lambda pair: ProgramNode(pair[0], ModuleKind.TRANSFORM, (pair[1],))
            ),
            st.tuples(children, children).map(
                lambda pair: ProgramNode("and", ModuleKind.AND, pair)
            ),
        ),
        max_leaves=max_leaves,
    )


@st.composite
def program_trees(draw, max_len=7):
    """An answer-rooted tree whose serialization fits in ``max_len`` tokens."""
    body = draw(
        _attention_trees(max_leaves=3).filter(
            lambda node: sum(1 for _ in node.walk()) <= max_len - 1
        )
    )
    return ProgramNode("answer", ModuleKind.ANSWER, (body,))


@st.composite
def programs(draw, max_len=7):
    """A valid program token tuple of length <= ``max_len``."""
    return serialize_tree(draw(program_trees(max_len=max_len)))


@st.composite
def token_sequences(draw, vocab=PROGRAM_VOCAB, max_len=7):
    """Arbitrary (usually invalid) sequences over ``vocab``."""
    return tuple(draw(st.lists(st.sampled_from(vocab.tokens), max_size=max_len)))


@st.composite
def scenes(draw):
    """A non-empty scene with up to one object per grid cell."""
    cells = [(x, y) for y in range(GRID) for x in range(GRID)]
    chosen = draw(
        st.lists(st.sampled_from(cells), min_size=1, max_size=len(cells), unique=True)
    )
    objects = [
        (x, y, draw(st.sampled_from(SHAPES)), draw(st.sampled_from(COLORS)))
        for x, y in chosen
    ]
    return Scene.from_objects(objects)


@st.composite
def seeds(draw):
    return draw(st.integers(min_value=0, max_value=2**31 - 1))


def rng_from(seed):
    return np.random.default_rng(seed)
