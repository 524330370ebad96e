"""Test-time answering, evaluation metrics and the posterior program probe."""

from __future__ import annotations

import logging
from collections import Counter
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import TYPE_CHECKING, Any, Optional

import numpy as np

from latentprog.autodiff import suspend_tape
from latentprog.exceptions import ConfigurationError
from latentprog.executor import encode_image, execute_program
from latentprog.grammar import is_valid_program
from latentprog.sequence import greedy_decode, sample_sequence
from latentprog.shapes import ANSWERS, DatasetSplit, QAItem, Scene, symbolic_execute

if TYPE_CHECKING:
    from latentprog.context import ModelBundle

logger = logging.getLogger(__name__)

__all__ = [
    "AnswerPrediction",
    "Metrics",
    "ProbeEntry",
    "ProbeResult",
    "compute_metrics",
    "posterior_probe",
    "predict_answer",
    "token_f1",
]

_UNIFORM = np.full(len(ANSWERS), 1.0 / len(ANSWERS))


def token_f1(predicted: Sequence[str], gold: Sequence[str]) -> float:
    """Multiset token overlap F1; two empty sequences score 1."""
    if not predicted and not gold:
        return 1.0
    common = sum((Counter(predicted) & Counter(gold)).values())
    if common == 0:
        return 0.0
    precision = common / len(predicted)
    recall = common / len(gold)
    return 2 * precision * recall / (precision + recall)


@dataclass(frozen=True)
class Metrics:
    program_accuracy: float
    program_f1: float
    reconstruction_accuracy: float
    vqa_accuracy: float
    count: int

    def as_dict(self) -> dict[str, float]:
        return {
            "program_accuracy": self.program_accuracy,
            "program_f1": self.program_f1,
            "reconstruction_accuracy": self.reconstruction_accuracy,
            "vqa_accuracy": self.vqa_accuracy,
        }


def _answer_distributions(
    bundle: ModelBundle, programs: Sequence[Sequence[str]], images: np.ndarray
) -> np.ndarray:
    """(B, |ANSWERS|) answer probabilities; invalid programs give the uniform row."""
    probs = np.tile(_UNIFORM, (len(programs), 1))
    groups: dict[tuple[str, ...], list[int]] = {}
    for row, program in enumerate(programs):
        if is_valid_program(program, bundle.program_vocab):
            groups.setdefault(tuple(program), []).append(row)
    with suspend_tape():
        for program, rows in groups.items():
            log_probs, _ = execute_program(
                bundle.bank, bundle.stem, program, images[rows]
            )
            probs[rows] = np.exp(log_probs.data)
    return probs


def compute_metrics(
    bundle: ModelBundle,
    data: DatasetSplit,
    split: str = "val",
    *,
    items: Optional[Sequence[QAItem]] = None,
    max_program_len: int = 7,
    max_question_len: int = 15,
    batch_size: int = 256,
) -> Metrics:
    """Exact-match program and reconstruction accuracy, token F1, VQA accuracy.

    Programs are decoded greedily from the inference network; questions are
    decoded greedily from the reconstructor given the gold program. VQA answers
    are the argmax under the decoded program (invalid programs answer with the
    uniform distribution, whose argmax is the first answer).
    """
    items = list(items) if items is not None else data.split(split)
    if not items:
        return Metrics(0.0, 0.0, 0.0, 0.0, 0)
    program_hits = reconstruction_hits = answer_hits = 0
    f1_total = 0.0
    for start in range(0, len(items), batch_size):
        batch = items[start : start + batch_size]
        questions = [item.question for item in batch]
        gold = [item.program for item in batch]
        decoded = greedy_decode(bundle.inference, questions, max_len=max_program_len)
        rebuilt = greedy_decode(bundle.reconstructor, gold, max_len=max_question_len)
        probs = _answer_distributions(bundle, decoded, data.images(batch))
        for row, item in enumerate(batch):
            program_hits += decoded[row] == tuple(item.program)
            reconstruction_hits += rebuilt[row] == tuple(item.question)
            f1_total += token_f1(decoded[row], item.program)
            answer_hits += ANSWERS[int(np.argmax(probs[row]))] == item.answer
    n = len(items)
    return Metrics(
        program_hits / n, f1_total / n, reconstruction_hits / n, answer_hits / n, n
    )


@dataclass(frozen=True)
class AnswerPrediction:
    distribution: np.ndarray
    answer: str
    invalid_samples: int


def predict_answer(
    bundle: ModelBundle,
    image: np.ndarray,
    question: Sequence[str],
    rng: np.random.Generator,
    n_samples: int = 20,
    *,
    max_program_len: int = 7,
) -> AnswerPrediction:
    """Average p(a | image, z) over z ~ q(z | question).

    Invalid samples contribute the uniform distribution; the argmax breaks ties
    toward the earlier answer.
    """
    if n_samples < 1:
        raise ConfigurationError(f"n_samples must be >= 1, got {n_samples}")
    with suspend_tape():
        programs = sample_sequence(
            bundle.inference,
            rng,
            sources=[tuple(question)] * n_samples,
            max_len=max_program_len,
        ).tokens
    counts = Counter(programs)
    invalid = sum(
        c for p, c in counts.items() if not is_valid_program(p, bundle.program_vocab)
    )
    if invalid:
        logger.info("predict_answer: %d of %d samples invalid", invalid, n_samples)
    unique = list(counts)
    images = np.repeat(image[None], len(unique), axis=0)
    probs = _answer_distributions(bundle, unique, images)
    mixture = np.zeros(len(ANSWERS))
    for row, program in enumerate(unique):
        mixture += (counts[program] / n_samples) * probs[row]
    return AnswerPrediction(mixture, ANSWERS[int(np.argmax(mixture))], invalid)


@dataclass(frozen=True)
class ProbeEntry:
    program: tuple[str, ...]
    log_prior: float
    question: tuple[str, ...]
    nmn_answer: str
    answer_probs: tuple[float, ...]
    oracle_answer: Optional[str] = None


@dataclass
class ProbeResult:
    """Programs drawn from the prior that the executor answers with ``target``.

    ``entries`` holds the ``top_k`` accepted programs by prior log-probability;
    ``accepted`` lists every distinct accepted program in the same order.
    """

    target: str
    entries: list[ProbeEntry] = field(default_factory=list)
    accepted: list[tuple[str, ...]] = field(default_factory=list)
    n_draws: int = 0
    n_valid: int = 0
    n_accepted: int = 0
    coherence: Optional[float] = None

    @property
    def acceptance_rate(self) -> float:
        return self.n_accepted / self.n_draws if self.n_draws else 0.0

    def summary(self) -> dict[str, Any]:
        return {
            "target": self.target,
            "n_draws": self.n_draws,
            "n_valid": self.n_valid,
            "n_accepted": self.n_accepted,
            "acceptance_rate": self.acceptance_rate,
            "distinct_accepted": len(self.accepted),
            "coherence": self.coherence,
        }

    def to_records(self) -> list[dict[str, Any]]:
        records = []
        for rank, entry in enumerate(self.entries, 1):
            record = asdict(entry)
            record["program"] = list(entry.program)
            record["question"] = " ".join(entry.question)
            record["rank"] = rank
            records.append(record)
        return records


def _probe_worker(
    bundle: ModelBundle,
    features: Any,
    draws: int,
    seed: np.random.SeedSequence,
    max_len: int,
) -> list[tuple[tuple[str, ...], float, Optional[np.ndarray]]]:
    rng = np.random.default_rng(seed)
    with suspend_tape():
        dist = sample_sequence(bundle.prior, rng, n=draws, max_len=max_len)
        results: list[tuple[tuple[str, ...], float, Optional[np.ndarray]]] = []
        cache: dict[tuple[str, ...], Optional[np.ndarray]] = {}
        for program, log_prior in zip(dist.tokens, dist.log_prob.data):
            if program not in cache:
                if is_valid_program(program, bundle.program_vocab):
                    log_probs, _ = execute_program(
                        bundle.bank, bundle.stem, program, features=features
                    )
                    cache[program] = np.exp(log_probs.data[0])
                else:
                    cache[program] = None
            results.append((program, float(log_prior), cache[program]))
    return results


def posterior_probe(
    bundle: ModelBundle,
    image: np.ndarray,
    target: str,
    *,
    n_draws: int = 2000,
    top_k: int = 10,
    seed: int = 0,
    workers: int = 1,
    scene: Optional[Scene] = None,
    max_program_len: int = 7,
    max_question_len: int = 15,
) -> ProbeResult:
    """Rejection-sample p(z | a, image) with the prior as proposal.

    Draws are split across ``workers`` with independent seed streams spawned
    from ``seed``; results are joined in worker order, so a fixed worker count
    reproduces the same output. With ``scene`` given, each accepted program is
    also run through the symbolic oracle and ``coherence`` is the fraction of
    accepted programs whose oracle answer equals ``target``.
    """
    if target not in ANSWERS:
        raise ConfigurationError(
            f"target answer must be one of {ANSWERS}, got {target!r}"
        )
    if n_draws < 1 or top_k < 1 or workers < 1:
        raise ConfigurationError("n_draws, top_k and workers must be >= 1")
    with suspend_tape():
        features = encode_image(bundle.stem, image)
    shares = [n_draws // workers + (i < n_draws % workers) for i in range(workers)]
    seeds = np.random.SeedSequence(seed).spawn(workers)
    jobs = [(share, s) for share, s in zip(shares, seeds) if share > 0]
    if workers == 1:
        chunks = [
            _probe_worker(bundle, features, n, s, max_program_len) for n, s in jobs
        ]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [
                pool.submit(_probe_worker, bundle, features, n, s, max_program_len)
                for n, s in jobs
            ]
            chunks = [f.result() for f in futures]

    target_index = ANSWERS.index(target)
    result = ProbeResult(target=target, n_draws=n_draws)
    accepted: dict[tuple[str, ...], tuple[float, np.ndarray]] = {}
    for program, log_prior, probs in (row for chunk in chunks for row in chunk):
        if probs is None:
            continue
        result.n_valid += 1
        if int(np.argmax(probs)) == target_index:
            result.n_accepted += 1
            accepted[program] = (log_prior, probs)
    if not accepted:
        logger.info(
            "posterior probe: no acceptances in %d draws (%d valid)",
            n_draws,
            result.n_valid,
        )
        return result

    ranked = sorted(accepted.items(), key=lambda kv: (-kv[1][0], kv[0]))
    result.accepted = [program for program, _ in ranked]
    with suspend_tape():
        questions = greedy_decode(
            bundle.reconstructor,
            [p for p, _ in ranked[:top_k]],
            max_len=max_question_len,
        )
    oracle = {}
    if scene is not None:
        oracle = {
            program: symbolic_execute(program, scene, bundle.program_vocab).answer
            for program in result.accepted
        }
        result.coherence = sum(a == target for a in oracle.values()) / len(oracle)
    for (program, (log_prior, probs)), question in zip(ranked[:top_k], questions):
        result.entries.append(
            ProbeEntry(
                program=program,
                log_prior=log_prior,
                question=question,
                nmn_answer=ANSWERS[int(np.argmax(probs))],
                answer_probs=tuple(float(p) for p in probs),
                oracle_answer=oracle.get(program),
            )
        )
    return result
