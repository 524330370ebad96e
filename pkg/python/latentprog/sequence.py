"""Autoregressive LSTM sequence models.

:class:`LanguageModel` is the program prior p(z); :class:`Seq2Seq` backs both
the inference network q(z|x) and the question reconstructor p(x|z). Scoring,
ancestral sampling and greedy decoding all run through :func:`_unroll`, so a
sampled sequence's recorded log-probability is bit-identical to the
teacher-forced score of the same batch.

Truncation: with ``max_len`` set, a sequence that has emitted ``max_len``
tokens ends with probability one (no END step is scored), which keeps the
distribution normalized over sequences of length ``<= max_len``. With
``max_len=None`` scoring is untruncated.
"""

from __future__ import annotations

import itertools
import logging
from collections.abc import Callable, Sequence
from dataclasses import dataclass
from typing import Any, Optional, Union

import numpy as np

from latentprog.autodiff import (
    Tape,
    Tensor,
    add,
    backward,
    concat,
    embedding,
    log_softmax,
    matmul,
    mean,
    mul,
    nll,
    scale,
    sigmoid,
    slice_last,
    suspend_tape,
    tanh,
)
from latentprog.exceptions import ConfigurationError, DatasetError, ShapeError
from latentprog.optim import Adam
from latentprog.vocab import Vocabulary

logger = logging.getLogger(__name__)

EMBED_DIM = 32
HIDDEN_DIM = 128

__all__ = [
    "EMBED_DIM",
    "HIDDEN_DIM",
    "LanguageModel",
    "Seq2Seq",
    "SequenceDistribution",
    "enumerate_sequences",
    "greedy_decode",
    "lm_log_prob",
    "pretrain_prior",
    "sample_sequence",
    "seq2seq_log_prob",
    "step_log_probs",
]


def _init(
    rng: np.random.Generator | None, shape: tuple[int, ...], bound: float, zero: bool
) -> np.ndarray:
    if zero or rng is None:
        return np.zeros(shape)
    return rng.uniform(-bound, bound, size=shape)


class _LSTM:
    """Embedding table plus one LSTM layer.

    Gates are ordered (input, forget, cell, output).
    """

    def __init__(
        self,
        prefix: str,
        input_size: int,
        embed_dim: int,
        hidden_dim: int,
        rng: np.random.Generator | None,
        zero_init: bool,
    ):
        if embed_dim < 1 or hidden_dim < 1:
            raise ConfigurationError(
                f"embed_dim and hidden_dim must be >= 1, got {embed_dim}, {hidden_dim}"
            )
        bound = 1.0 / np.sqrt(hidden_dim)
        self.prefix = prefix
        self.embed_dim = embed_dim
        self.hidden_dim = hidden_dim
        self.embedding = Tensor(
            _init(rng, (input_size, embed_dim), 0.1, zero_init),
            True,
            f"{prefix}.embedding",
        )
        self.weight = Tensor(
            _init(rng, (embed_dim + hidden_dim, 4 * hidden_dim), bound, zero_init),
            True,
            f"{prefix}.lstm.weight",
        )
        bias = np.zeros(4 * hidden_dim)
        if not zero_init:
            bias[hidden_dim : 2 * hidden_dim] = 1.0
        self.bias = Tensor(bias, True, f"{prefix}.lstm.bias")

    def parameters(self) -> dict[str, Tensor]:
        return {t.name or "": t for t in (self.embedding, self.weight, self.bias)}

    def zero_state(self, batch: int) -> tuple[Tensor, Tensor]:
        return (
            Tensor(np.zeros((batch, self.hidden_dim))),
            Tensor(np.zeros((batch, self.hidden_dim))),
        )

    def step(
        self, ids: np.ndarray, state: tuple[Tensor, Tensor]
    ) -> tuple[Tensor, Tensor]:
        h, c = state
        x = embedding(self.embedding, ids)
        gates = add(matmul(concat([x, h]), self.weight), self.bias)
        size = self.hidden_dim
        i = sigmoid(slice_last(gates, 0, size))
        f = sigmoid(slice_last(gates, size, 2 * size))
        g = tanh(slice_last(gates, 2 * size, 3 * size))
        o = sigmoid(slice_last(gates, 3 * size, 4 * size))
        c = add(mul(f, c), mul(i, g))
        return mul(o, tanh(c)), c


class _Decoder(_LSTM):
    """LSTM with an output projection onto the content tokens plus END."""

    def __init__(
        self,
        prefix: str,
        vocab: Vocabulary,
        embed_dim: int,
        hidden_dim: int,
        rng: np.random.Generator | None,
        zero_init: bool,
    ):
        super().__init__(
            prefix, vocab.input_size, embed_dim, hidden_dim, rng, zero_init
        )
        self.vocab = vocab
        bound = 1.0 / np.sqrt(hidden_dim)
        self.out_weight = Tensor(
            _init(rng, (hidden_dim, vocab.output_size), bound, zero_init),
            True,
            f"{prefix}.out.weight",
        )
        self.out_bias = Tensor(np.zeros(vocab.output_size), True, f"{prefix}.out.bias")

    def parameters(self) -> dict[str, Tensor]:
        params = super().parameters()
        params[self.out_weight.name or ""] = self.out_weight
        params[self.out_bias.name or ""] = self.out_bias
        return params

    def log_probs(self, h: Tensor) -> Tensor:
        return log_softmax(add(matmul(h, self.out_weight), self.out_bias))


class _Model:
    decoder: _Decoder
    name: str

    def parameters(self) -> dict[str, Tensor]:
        raise NotImplementedError

    def freeze(self) -> None:
        """Freeze every parameter; later gradient writes raise."""
        for param in self.parameters().values():
            param.freeze()

    @property
    def frozen(self) -> bool:
        return all(p.frozen for p in self.parameters().values())

    def zero_grad(self) -> None:
        for param in self.parameters().values():
            param.grad = None


class LanguageModel(_Model):
    """Unconditional LSTM language model, used as the program prior.

    Args:
        vocab: Output vocabulary.
        embed_dim: Token embedding width.
        hidden_dim: LSTM hidden size.
        rng: Initialization stream; ``None`` or ``zero_init`` gives all-zero
            weights (a uniform model).
        name: Parameter name prefix.
    """

    def __init__(
        self,
        vocab: Vocabulary,
        embed_dim: int = EMBED_DIM,
        hidden_dim: int = HIDDEN_DIM,
        rng: np.random.Generator | None = None,
        *,
        zero_init: bool = False,
        name: str = "prior",
    ):
        self.name = name
        self.vocab = vocab
        self.decoder = _Decoder(name, vocab, embed_dim, hidden_dim, rng, zero_init)

    def parameters(self) -> dict[str, Tensor]:
        return self.decoder.parameters()

    def initial_state(self, sources: Any, batch: int) -> tuple[Tensor, Tensor]:
        return self.decoder.zero_state(batch)

    def dims(self) -> dict[str, int]:
        decoder = self.decoder
        return {"embed_dim": decoder.embed_dim, "hidden_dim": decoder.hidden_dim}


class Seq2Seq(_Model):
    """Encoder-decoder pair; the encoder's final (h, c) seeds the decoder.

    Args:
        src_vocab: Vocabulary read by the encoder.
        tgt_vocab: Vocabulary emitted by the decoder.
    """

    def __init__(
        self,
        src_vocab: Vocabulary,
        tgt_vocab: Vocabulary,
        embed_dim: int = EMBED_DIM,
        hidden_dim: int = HIDDEN_DIM,
        rng: np.random.Generator | None = None,
        *,
        zero_init: bool = False,
        name: str = "seq2seq",
    ):
        self.name = name
        self.src_vocab = src_vocab
        self.vocab = tgt_vocab
        self.encoder = _LSTM(
            f"{name}.encoder",
            src_vocab.input_size,
            embed_dim,
            hidden_dim,
            rng,
            zero_init,
        )
        self.decoder = _Decoder(
            f"{name}.decoder", tgt_vocab, embed_dim, hidden_dim, rng, zero_init
        )

    def parameters(self) -> dict[str, Tensor]:
        return {**self.encoder.parameters(), **self.decoder.parameters()}

    def dims(self) -> dict[str, int]:
        decoder = self.decoder
        return {"embed_dim": decoder.embed_dim, "hidden_dim": decoder.hidden_dim}

    def initial_state(
        self, sources: Sequence[Sequence[str]], batch: int
    ) -> tuple[Tensor, Tensor]:
        if len(sources) != batch:
            raise ShapeError(f"expected {batch} source sequences, got {len(sources)}")
        ids = [self.src_vocab.encode(src) for src in sources]
        lengths = np.array([len(row) for row in ids], dtype=np.int64)
        # empty sources keep the zero state
        steps = int(lengths.max()) if lengths.size else 0
        padded = np.full((batch, steps), self.src_vocab.pad_id, dtype=np.int64)
        for row, seq in enumerate(ids):
            padded[row, : len(seq)] = seq

        h, c = self.encoder.zero_state(batch)
        for t in range(steps):
            new_h, new_c = self.encoder.step(padded[:, t], (h, c))
            keep = (lengths > t).astype(float)[:, None]
            h = _blend(new_h, h, keep)
            c = _blend(new_c, c, keep)
        return h, c


SequenceModel = Union[LanguageModel, Seq2Seq]


def _blend(new: Tensor, old: Tensor, keep: np.ndarray) -> Tensor:
    take = np.broadcast_to(keep, new.shape)
    return add(mul(new, Tensor(take)), mul(old, Tensor(1.0 - take)))


@dataclass
class SequenceDistribution:
    """Ancestral (or greedy) rollout of a batch.

    Attributes:
        tokens: Realized content tokens per row (END excluded).
        ids: The same as output-space ids.
        step_probs: (B, T, V+1) categorical parameters at every step.
        step_mask: (B, T) 1.0 where the step was scored for that row.
        log_prob: (B,) differentiable sequence log-probabilities.
        truncated: Rows ended by the ``max_len`` cap instead of END.
    """

    tokens: list[tuple[str, ...]]
    ids: list[tuple[int, ...]]
    step_probs: np.ndarray
    step_mask: np.ndarray
    log_prob: Tensor
    truncated: np.ndarray
    steps: list[Tensor]

    def __len__(self) -> int:
        return len(self.tokens)


Picker = Callable[[int, np.ndarray, np.ndarray], np.ndarray]


def _unroll(
    model: SequenceModel,
    sources: Optional[Sequence[Sequence[str]]],
    batch: int,
    max_len: Optional[int],
    pick: Picker,
    length_normalize: bool = False,
) -> SequenceDistribution:
    if max_len is not None and max_len < 1:
        raise ConfigurationError(f"max_len must be >= 1, got {max_len}")
    decoder = model.decoder
    vocab = decoder.vocab
    state = model.initial_state(sources, batch)
    inputs = np.full(batch, vocab.start_id, dtype=np.int64)
    active = np.ones(batch, dtype=bool)
    emitted: list[list[int]] = [[] for _ in range(batch)]
    steps: list[Tensor] = []
    probs: list[np.ndarray] = []
    masks: list[np.ndarray] = []

    t = 0
    while active.any() and (max_len is None or t < max_len):
        state = decoder.step(inputs, state)
        log_probs = decoder.log_probs(state[0])
        chosen = np.where(active, pick(t, log_probs.data, active), 0).astype(np.int64)
        mask = active.astype(float)
        steps.append(mul(scale(nll(log_probs, chosen), -1.0), Tensor(mask)))
        probs.append(np.exp(log_probs.data))
        masks.append(mask)
        for row in np.flatnonzero(active):
            if chosen[row] == vocab.end_id:
                active[row] = False
            else:
                emitted[row].append(int(chosen[row]))
        inputs = np.where(active, chosen, vocab.pad_id)
        t += 1

    total = Tensor(np.zeros(batch))
    for contribution in steps:
        total = add(total, contribution)
    step_mask = np.stack(masks, axis=1) if masks else np.zeros((batch, 0))
    if length_normalize and steps:
        total = mul(total, Tensor(1.0 / np.maximum(step_mask.sum(axis=1), 1.0)))
    step_probs = (
        np.stack(probs, axis=1) if probs else np.zeros((batch, 0, vocab.output_size))
    )
    return SequenceDistribution(
        tokens=[vocab.decode(row) for row in emitted],
        ids=[tuple(row) for row in emitted],
        step_probs=step_probs,
        step_mask=step_mask,
        log_prob=total,
        truncated=active.copy(),
        steps=steps,
    )


def _forced(
    vocab: Vocabulary, sequences: Sequence[Sequence[str]], max_len: Optional[int]
) -> Picker:
    ids = [vocab.encode(seq) for seq in sequences]
    for seq in ids:
        if max_len is not None and len(seq) > max_len:
            raise ShapeError(f"sequence of length {len(seq)} exceeds max_len {max_len}")

    def pick(t: int, log_probs: np.ndarray, active: np.ndarray) -> np.ndarray:
        return np.array(
            [
                seq[t] if t < len(seq) else vocab.end_id if t == len(seq) else 0
                for seq in ids
            ],
            dtype=np.int64,
        )

    return pick


def step_log_probs(
    model: SequenceModel,
    targets: Sequence[Sequence[str]],
    sources: Optional[Sequence[Sequence[str]]] = None,
    *,
    max_len: Optional[int] = None,
) -> list[Tensor]:
    """Per-step masked log-probabilities of the teacher-forced ``targets``.

    Summing the returned (B,) tensors in order reproduces the sequence score.
    """
    pick = _forced(model.decoder.vocab, targets, max_len)
    return _unroll(model, sources, len(targets), max_len, pick).steps


def lm_log_prob(
    model: LanguageModel,
    sequences: Sequence[Sequence[str]],
    *,
    max_len: Optional[int] = None,
    length_normalize: bool = False,
) -> Tensor:
    """Teacher-forced log-probabilities (B,), END emission included.

    Raises:
        UnknownTokenError: A token is outside the vocabulary.
        ShapeError: A sequence is longer than ``max_len``.
    """
    pick = _forced(model.vocab, sequences, max_len)
    unrolled = _unroll(model, None, len(sequences), max_len, pick, length_normalize)
    return unrolled.log_prob


def seq2seq_log_prob(
    model: Seq2Seq,
    sources: Sequence[Sequence[str]],
    targets: Sequence[Sequence[str]],
    *,
    max_len: Optional[int] = None,
    length_normalize: bool = False,
) -> Tensor:
    """log p(target | source) per row (B,); the encoder reads ``sources``."""
    if len(sources) != len(targets):
        raise ShapeError(f"{len(sources)} sources for {len(targets)} targets")
    pick = _forced(model.vocab, targets, max_len)
    unrolled = _unroll(model, sources, len(targets), max_len, pick, length_normalize)
    return unrolled.log_prob


def sample_sequence(
    model: SequenceModel,
    rng: np.random.Generator,
    *,
    sources: Optional[Sequence[Sequence[str]]] = None,
    n: Optional[int] = None,
    max_len: int,
    length_normalize: bool = False,
) -> SequenceDistribution:
    """Ancestral sampling until END or ``max_len``.

    Conditional models take one row per entry of ``sources``; the prior takes
    ``n`` rows. The returned ``log_prob`` stays on the active tape.
    """
    batch = len(sources) if sources is not None else n
    if batch is None or batch < 1:
        raise ConfigurationError("sample_sequence needs sources or n >= 1")

    def pick(t: int, log_probs: np.ndarray, active: np.ndarray) -> np.ndarray:
        cdf = np.cumsum(np.exp(log_probs), axis=1)
        cdf[:, -1] = 1.0
        u = rng.random(log_probs.shape[0])
        return np.argmax(u[:, None] < cdf, axis=1)

    return _unroll(model, sources, batch, max_len, pick, length_normalize)


def _argmax(t: int, log_probs: np.ndarray, active: np.ndarray) -> np.ndarray:
    return np.argmax(log_probs, axis=1)


def greedy_decode(
    model: SequenceModel,
    sources: Optional[Sequence[Sequence[str]]] = None,
    *,
    n: Optional[int] = None,
    max_len: int,
) -> list[tuple[str, ...]]:
    """Argmax token per step (lowest index wins ties); deterministic, untaped."""
    batch = len(sources) if sources is not None else n
    if batch is None or batch < 1:
        raise ConfigurationError("greedy_decode needs sources or n >= 1")
    with suspend_tape():
        return _unroll(model, sources, batch, max_len, _argmax).tokens


def greedy_distribution(
    model: SequenceModel,
    sources: Optional[Sequence[Sequence[str]]] = None,
    *,
    n: Optional[int] = None,
    max_len: int,
) -> SequenceDistribution:
    """Greedy rollout with its per-step parameters and log-probabilities."""
    batch = len(sources) if sources is not None else n
    if batch is None or batch < 1:
        raise ConfigurationError("greedy_distribution needs sources or n >= 1")
    return _unroll(model, sources, batch, max_len, _argmax)


def enumerate_sequences(vocab: Vocabulary, max_len: int) -> list[tuple[str, ...]]:
    """Every token sequence of length ``0..max_len`` (toy-scale oracles only)."""
    return [
        seq
        for length in range(max_len + 1)
        for seq in itertools.product(vocab.tokens, repeat=length)
    ]


def pretrain_prior(
    model: LanguageModel,
    rng: np.random.Generator,
    *,
    mode: str = "syntactic",
    simulate: Callable[[np.random.Generator], Sequence[str]] | None = None,
    corpus: Sequence[Sequence[str]] | None = None,
    steps: int = 2000,
    batch_size: int = 64,
    lr: float = 1e-3,
    max_len: int = 7,
    log_every: int = 200,
) -> LanguageModel:
    """Fit the prior by maximum likelihood, then freeze it.

    ``syntactic`` draws each batch from ``simulate``; ``empirical`` samples
    batches (with replacement) from ``corpus``.

    Raises:
        ConfigurationError: Unknown mode or missing simulator.
        DatasetError: ``empirical`` mode with an empty corpus.
    """
    if mode == "syntactic":
        if simulate is None:
            raise ConfigurationError("syntactic prior needs a program simulator")
        draw = simulate
    elif mode == "empirical":
        if not corpus:
            raise DatasetError("empirical prior needs a non-empty program corpus")
        programs = list(corpus)

        def draw(r: np.random.Generator) -> Sequence[str]:
            return programs[int(r.integers(len(programs)))]

    else:
        raise ConfigurationError(
            f"prior mode must be 'syntactic' or 'empirical', got {mode!r}"
        )
    if steps < 0 or batch_size < 1:
        raise ConfigurationError(
            f"steps must be >= 0 and batch_size >= 1, got {steps}, {batch_size}"
        )

    optimizer = Adam(model.parameters(), lr=lr)
    for step in range(1, steps + 1):
        batch = [draw(rng) for _ in range(batch_size)]
        with Tape() as tape:
            loss = scale(mean(lm_log_prob(model, batch, max_len=max_len)), -1.0)
        backward(tape, loss)
        optimizer.step()
        if log_every and step % log_every == 0:
            logger.info("prior %s step %d: nll %.4f", mode, step, loss.item())
    model.freeze()
    logger.info("prior pretrained (%s, %d steps) and frozen", mode, steps)
    return model
