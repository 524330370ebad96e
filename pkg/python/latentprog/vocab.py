"""Token vocabularies shared by the sequence models.

Content tokens occupy ids ``0..K-1`` in both the input (embedding) space and
the output (softmax) space. The input space appends START and PAD rows; the
output space appends END, so every sequence probability includes emitting END.
"""

from __future__ import annotations

import hashlib
from collections.abc import Iterable, Sequence

from latentprog.exceptions import ConfigurationError, UnknownTokenError

START = "<start>"
END = "<end>"
PAD = "<pad>"
CONTROL_TOKENS = (START, END, PAD)

__all__ = ["CONTROL_TOKENS", "END", "PAD", "START", "Vocabulary"]


class Vocabulary:
    """Ordered set of content tokens.

    Args:
        tokens: Content tokens; must be unique and must not use control names.

    Raises:
        ConfigurationError: Empty, duplicated, or reserved tokens.
    """

    def __init__(self, tokens: Iterable[str]):
        tokens = tuple(tokens)
        if not tokens:
            raise ConfigurationError("Vocabulary must contain at least one token")
        if len(set(tokens)) != len(tokens):
            raise ConfigurationError("Vocabulary tokens must be unique")
        reserved = [t for t in tokens if t in CONTROL_TOKENS]
        if reserved:
            raise ConfigurationError(
                f"Reserved control tokens in vocabulary: {reserved}"
            )
        self.tokens: tuple[str, ...] = tokens
        self._index = {token: i for i, token in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: object) -> bool:
        return token in self._index

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def __hash__(self) -> int:
        return hash(self.tokens)

    @property
    def start_id(self) -> int:
        return len(self.tokens)

    @property
    def pad_id(self) -> int:
        return len(self.tokens) + 1

    @property
    def end_id(self) -> int:
        return len(self.tokens)

    @property
    def input_size(self) -> int:
        return len(self.tokens) + 2

    @property
    def output_size(self) -> int:
        return len(self.tokens) + 1

    def index(self, token: str, position: int = 1) -> int:
        try:
            return self._index[token]
        except KeyError:
            raise UnknownTokenError(token, position) from None

    def encode(self, sequence: Sequence[str]) -> list[int]:
        return [
            self.index(token, position)
            for position, token in enumerate(sequence, 1)
        ]

    def decode(self, ids: Iterable[int]) -> tuple[str, ...]:
        return tuple(self.tokens[i] for i in ids)

    def fingerprint(self) -> str:
        """SHA256 over the ordered tokens (and any subclass annotations)."""
        return hashlib.sha256(self._fingerprint_text().encode("utf-8")).hexdigest()

    def _fingerprint_text(self) -> str:
        return "\n".join(self.tokens)

    def __repr__(self) -> str:
        return f"{type(self).__name__}({len(self.tokens)} tokens)"
