"""Three-stage training: question coding, module training, joint training.

Question coding fits the inference network q(z|x) and the reconstructor
p(x|z) against the frozen prior p(z) with a beta-scaled evidence bound plus an
alpha-scaled supervised term. Module training fits the executor on programs
decoded from q. Joint training optimizes everything with the gamma-scaled
answer likelihood added to the reward.

Gradients of expectations over sampled programs use the score-function
estimator with a moving-average baseline (:func:`reinforce_grad`); terms that
depend on parameters directly (reconstruction, answer likelihood, supervised
likelihoods, and the -beta log q path term) are differentiated directly. All
terms of a batch are combined into one scalar and stepped once.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np

from latentprog.autodiff import (
    Tape,
    Tensor,
    add,
    backward,
    mul,
    scale,
    suspend_tape,
    total,
)
from latentprog.config import STAGES, ExperimentConfig
from latentprog.context import ModelBundle
from latentprog.exceptions import NumericError, TrainingError
from latentprog.executor import answer_log_prob
from latentprog.grammar import is_valid_program
from latentprog.optim import Adam
from latentprog.probe import Metrics, compute_metrics
from latentprog.sequence import (
    SequenceDistribution,
    greedy_decode,
    lm_log_prob,
    sample_sequence,
    seq2seq_log_prob,
)
from latentprog.shapes import DatasetSplit, QAItem

logger = logging.getLogger(__name__)

MetricSink = Callable[[str, int, str, float], None]

PRIMARY_METRIC = {
    "question_coding": "program_accuracy",
    "module_training": "vqa_accuracy",
    "joint_training": "vqa_accuracy",
}
_STAGE_STREAMS = {name: 10 + index for index, name in enumerate(STAGES)}

__all__ = [
    "BaselineState",
    "BatchRecord",
    "EpochReport",
    "StageReport",
    "StageState",
    "joint_training_batch",
    "joint_training_epoch",
    "module_training_batch",
    "module_training_epoch",
    "question_coding_batch",
    "question_coding_epoch",
    "reinforce_grad",
    "reinforce_surrogate",
    "run_stage",
    "start_stage",
    "update_baseline",
]


@dataclass(frozen=True)
class BaselineState:
    """Moving-average reward baseline ``b`` with decay ``D``."""

    value: float = 0.0
    decay: float = 0.99


def update_baseline(state: BaselineState, reward: float) -> BaselineState:
    """``b <- b + D * (R - b)`` for the batch-mean reward ``R``.

    Examples:
        >>> update_baseline(BaselineState(0.0, 0.99), 1.0).value
        0.99
    """
    if not math.isfinite(reward):
        raise NumericError(f"Non-finite reward {reward} for baseline update")
    value = state.value + state.decay * (reward - state.value)
    return BaselineState(value, state.decay)


def reinforce_surrogate(
    rewards: np.ndarray,
    log_q: Tensor,
    baseline: float,
    *,
    path_coef: float = 0.0,
    weight: float | None = None,
) -> Tensor:
    """Scalar whose gradient is ``sum_i w * ((R_i - b) - path_coef) * grad log q_i``.

    ``path_coef`` carries the direct dependence of the objective on
    ``-path_coef * log q``. ``weight`` defaults to ``1 / len(rewards)``.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.shape != log_q.shape:
        raise TrainingError(f"rewards {rewards.shape} do not match log q {log_q.shape}")
    if not np.all(np.isfinite(rewards)):
        raise NumericError("Non-finite reward passed to the score-function estimator")
    w = 1.0 / rewards.size if weight is None else weight
    coef = (rewards - baseline - path_coef) * w
    return total(mul(log_q, Tensor(coef)))


def reinforce_grad(
    reward_fn: Callable[[list[tuple[str, ...]]], np.ndarray],
    dist: SequenceDistribution,
    baseline: BaselineState,
    *,
    path_coef: float = 0.0,
    weight: float | None = None,
) -> tuple[Tensor, BaselineState]:
    """Score-function surrogate for ``dist`` and the updated baseline.

    The baseline is read before it is updated with this batch's mean reward.
    Differentiate the returned surrogate (maximize) to obtain the gradient
    contribution for the sampling model.
    Question coding and joint training both step through here, passing their
    precomputed rewards as ``lambda _: rewards``.
    """
    rewards = np.asarray(reward_fn(dist.tokens), dtype=np.float64)
    surrogate = reinforce_surrogate(
        rewards, dist.log_prob, baseline.value, path_coef=path_coef, weight=weight
    )
    return surrogate, update_baseline(baseline, float(rewards.mean()))


@dataclass
class BatchRecord:
    """Value bookkeeping for one optimizer step.

    ``objective`` equals the sum of ``components`` up to rounding.
    """

    objective: float
    components: dict[str, float]
    mean_reward: float = 0.0
    mean_kl: float = 0.0
    invalid: int = 0
    stepped: bool = True


@dataclass
class EpochReport:
    epoch: int
    objective: float
    mean_reward: float
    mean_kl: float
    batches: int
    skipped_batches: int
    invalid_programs: int
    metrics: Optional[Metrics] = None


@dataclass
class StageReport:
    stage: str
    epochs: list[EpochReport] = field(default_factory=list)
    validations: list[dict[str, Any]] = field(default_factory=list)
    final_lr: float = 0.0
    stopped_early: bool = False

    @property
    def last_metrics(self) -> Optional[Metrics]:
        for report in reversed(self.epochs):
            if report.metrics is not None:
                return report.metrics
        return None


@dataclass
class StageState:
    """Mutable per-stage loop state: optimizer, baseline, plateau tracking."""

    name: str
    optimizer: Adam
    baseline: BaselineState
    rng: np.random.Generator
    step: int = 0
    best: float = -math.inf
    bad_validations: int = 0
    halvings: int = 0
    stopped: bool = False


def _stage_parameters(name: str, bundle: ModelBundle) -> dict[str, Tensor]:
    if name == "question_coding":
        return {**bundle.inference.parameters(), **bundle.reconstructor.parameters()}
    if name == "module_training":
        return {**bundle.stem.parameters(), **bundle.bank.parameters()}
    return {
        **bundle.inference.parameters(),
        **bundle.reconstructor.parameters(),
        **bundle.stem.parameters(),
        **bundle.bank.parameters(),
    }


def start_stage(name: str, bundle: ModelBundle, config: ExperimentConfig) -> StageState:
    """Fresh optimizer and baseline, with an RNG derived from seed and stage."""
    stage = config.stage(name)
    return StageState(
        name=name,
        optimizer=Adam(_stage_parameters(name, bundle), lr=stage.lr),
        baseline=BaselineState(decay=config.hyperparams.baseline_decay),
        rng=np.random.default_rng([config.seed, _STAGE_STREAMS[name]]),
    )


def _sum(pieces: Sequence[Tensor]) -> Tensor:
    result = pieces[0]
    for piece in pieces[1:]:
        result = add(result, piece)
    return result


def _optimize(state: StageState, pieces: list[Tensor], tape: Tape) -> bool:
    """Backward on ``-sum(pieces)`` and step every parameter that got a gradient."""
    live = [p for p in pieces if p.requires_grad]
    if not live:
        return False
    with tape:
        loss = scale(_sum(live), -1.0)
    backward(tape, loss)
    names = [n for n, p in state.optimizer.params.items() if p.grad is not None]
    if names:
        state.optimizer.step(names)
    state.step += 1
    return True


def _clear_grads(state: StageState) -> None:
    for param in state.optimizer.params.values():
        param.grad = None


def _supervised_terms(
    bundle: ModelBundle,
    items: Sequence[QAItem],
    config: ExperimentConfig,
    weight: float,
) -> tuple[list[Tensor], dict[str, float]]:
    hp, limits = config.hyperparams, config.data
    normalize = config.model.length_normalize
    questions = [item.question for item in items]
    programs = [item.program for item in items]
    log_q = seq2seq_log_prob(
        bundle.inference,
        questions,
        programs,
        max_len=limits.max_program_len,
        length_normalize=normalize,
    )
    log_recon = seq2seq_log_prob(
        bundle.reconstructor,
        programs,
        questions,
        max_len=limits.max_question_len,
        length_normalize=normalize,
    )
    recon_scale = hp.alpha if hp.scale_reconstruction_with_alpha else 1.0
    program_term = scale(total(log_q), hp.alpha * weight)
    question_term = scale(total(log_recon), recon_scale * weight)
    values = {
        "supervised_program": float(program_term.data),
        "supervised_question": float(question_term.data),
    }
    return [program_term, question_term], values


def _sample_programs(
    bundle: ModelBundle,
    items: Sequence[QAItem],
    config: ExperimentConfig,
    rng: np.random.Generator,
) -> tuple[list[tuple[str, ...]], SequenceDistribution, Tensor, np.ndarray]:
    """z ~ q(z|x) per row (``samples`` rows per item), log p(x|z) and log p(z)."""
    repeats = config.hyperparams.samples
    questions = [item.question for item in items for _ in range(repeats)]
    dist = sample_sequence(
        bundle.inference,
        rng,
        sources=questions,
        max_len=config.data.max_program_len,
        length_normalize=config.model.length_normalize,
    )
    log_recon = seq2seq_log_prob(
        bundle.reconstructor,
        dist.tokens,
        questions,
        max_len=config.data.max_question_len,
        length_normalize=config.model.length_normalize,
    )
    log_prior = lm_log_prob(
        bundle.prior,
        dist.tokens,
        max_len=config.data.max_program_len,
        length_normalize=config.model.length_normalize,
    ).data
    return questions, dist, log_recon, log_prior


def question_coding_batch(
    bundle: ModelBundle,
    items: Sequence[QAItem],
    config: ExperimentConfig,
    state: StageState,
) -> BatchRecord:
    """One step on ``items``: bound reward for unsupervised, likelihood for teaching."""
    hp = config.hyperparams
    supervised = [item for item in items if item.teaching]
    unsupervised = [item for item in items if not item.teaching]
    weight = 1.0 / len(items)
    row_weight = weight / hp.samples
    components: dict[str, float] = {}
    objective = 0.0
    rewards = np.zeros(0)
    kl = np.zeros(0)
    next_baseline: Optional[BaselineState] = None

    _clear_grads(state)
    with Tape() as tape:
        pieces: list[Tensor] = []
        if unsupervised:
            _, dist, log_recon, log_prior = _sample_programs(
                bundle, unsupervised, config, state.rng
            )
            kl = dist.log_prob.data - log_prior
            rewards = log_recon.data - hp.beta * kl
            surrogate, next_baseline = reinforce_grad(
                lambda _: rewards,
                dist,
                state.baseline,
                path_coef=hp.beta,
                weight=row_weight,
            )
            pieces.append(surrogate)
            pieces.append(scale(total(log_recon), row_weight))
            components["reconstruction"] = float(log_recon.data.sum() * row_weight)
            components["kl"] = float(-hp.beta * kl.sum() * row_weight)
            objective += float(rewards.sum() * row_weight)
        if supervised:
            terms, values = _supervised_terms(bundle, supervised, config, weight)
            pieces.extend(terms)
            components.update(values)
            objective += sum(values.values())
    _optimize(state, pieces, tape)
    if next_baseline is not None:
        state.baseline = next_baseline
    return BatchRecord(
        objective,
        components,
        mean_reward=float(rewards.mean()) if rewards.size else 0.0,
        mean_kl=float(kl.mean()) if kl.size else 0.0,
    )


def _program_groups(
    programs: Sequence[tuple[str, ...]]
) -> dict[tuple[str, ...], list[int]]:
    groups: dict[tuple[str, ...], list[int]] = {}
    for row, program in enumerate(programs):
        groups.setdefault(tuple(program), []).append(row)
    return groups


def _answer_terms(
    bundle: ModelBundle,
    programs: Sequence[tuple[str, ...]],
    images: np.ndarray,
    answers: Sequence[str],
) -> tuple[list[Tensor], np.ndarray]:
    """Per-program answer log-likelihoods; rows keyed by their index."""
    values = np.zeros(len(programs))
    tensors: list[tuple[list[int], Tensor]] = []
    for program, rows in _program_groups(programs).items():
        log_p = answer_log_prob(
            bundle.bank, bundle.stem, program, images[rows], [answers[r] for r in rows]
        )
        values[rows] = log_p.data
        tensors.append((rows, log_p))
    return [t for _, t in tensors], values


def _training_programs(
    bundle: ModelBundle,
    items: Sequence[QAItem],
    config: ExperimentConfig,
    state: StageState,
) -> list[tuple[str, ...]]:
    """Gold programs for teaching items, decoded programs for the rest."""
    programs = [item.program for item in items]
    unsupervised = [row for row, item in enumerate(items) if not item.teaching]
    if not unsupervised:
        return programs
    questions = [items[row].question for row in unsupervised]
    max_len = config.data.max_program_len
    if config.module_training.program_source == "sample":
        with suspend_tape():
            decoded = sample_sequence(
                bundle.inference, state.rng, sources=questions, max_len=max_len
            ).tokens
    else:
        decoded = greedy_decode(bundle.inference, questions, max_len=max_len)
    for row, program in zip(unsupervised, decoded):
        programs[row] = program
    return programs


def module_training_batch(
    bundle: ModelBundle,
    items: Sequence[QAItem],
    data: DatasetSplit,
    config: ExperimentConfig,
    state: StageState,
) -> BatchRecord:
    """Maximize log p(a | image; theta_z) on valid programs, skipping invalid ones."""
    programs = _training_programs(bundle, items, config, state)
    vocab = bundle.program_vocab
    valid = [row for row, p in enumerate(programs) if is_valid_program(p, vocab)]
    invalid = len(items) - len(valid)
    if not valid:
        logger.warning(
            "module training step %d: all %d programs invalid, batch skipped",
            state.step,
            len(items),
        )
        return BatchRecord(0.0, {"answer": 0.0}, invalid=invalid, stepped=False)

    chosen = [items[row] for row in valid]
    images = data.images(chosen)
    _clear_grads(state)
    with Tape() as tape:
        terms, values = _answer_terms(
            bundle, [programs[row] for row in valid], images, [i.answer for i in chosen]
        )
        weight = 1.0 / len(valid)
        pieces = [scale(total(term), weight) for term in terms]
    _optimize(state, pieces, tape)
    objective = float(values.mean())
    return BatchRecord(objective, {"answer": objective}, invalid=invalid)


def joint_training_batch(
    bundle: ModelBundle,
    items: Sequence[QAItem],
    data: DatasetSplit,
    config: ExperimentConfig,
    state: StageState,
) -> BatchRecord:
    """Full objective: gamma-scaled answer likelihood joins the sampled reward."""
    hp = config.hyperparams
    supervised = [item for item in items if item.teaching]
    unsupervised = [item for item in items if not item.teaching]
    weight = 1.0 / len(items)
    row_weight = weight / hp.samples
    components: dict[str, float] = {}
    objective = 0.0
    rewards = np.zeros(0)
    kl = np.zeros(0)
    next_baseline: Optional[BaselineState] = None
    invalid = 0

    _clear_grads(state)
    with Tape() as tape:
        pieces: list[Tensor] = []
        if unsupervised:
            _, dist, log_recon, log_prior = _sample_programs(
                bundle, unsupervised, config, state.rng
            )
            rows = [r // hp.samples for r in range(len(dist))]
            # gamma scales executed rows only; invalid rows keep the flat penalty
            answer_term = np.full(len(dist), hp.invalid_reward)
            vocab = bundle.program_vocab
            valid = [r for r, z in enumerate(dist.tokens) if is_valid_program(z, vocab)]
            invalid = len(dist) - len(valid)
            if valid:
                images = data.images([unsupervised[rows[r]] for r in valid])
                terms, values = _answer_terms(
                    bundle,
                    [dist.tokens[r] for r in valid],
                    images,
                    [unsupervised[rows[r]].answer for r in valid],
                )
                answer_term[valid] = hp.gamma * np.asarray(values)
                pieces.extend(scale(total(t), hp.gamma * row_weight) for t in terms)
            kl = dist.log_prob.data - log_prior
            rewards = answer_term + log_recon.data - hp.beta * kl
            surrogate, next_baseline = reinforce_grad(
                lambda _: rewards,
                dist,
                state.baseline,
                path_coef=hp.beta,
                weight=row_weight,
            )
            pieces.append(surrogate)
            pieces.append(scale(total(log_recon), row_weight))
            components["answer"] = float(answer_term.sum() * row_weight)
            components["reconstruction"] = float(log_recon.data.sum() * row_weight)
            components["kl"] = float(-hp.beta * kl.sum() * row_weight)
            objective += float(rewards.sum() * row_weight)
        if supervised:
            terms, sup_values = _supervised_terms(bundle, supervised, config, weight)
            pieces.extend(terms)
            components.update(sup_values)
            objective += sum(sup_values.values())
    _optimize(state, pieces, tape)
    if next_baseline is not None:
        state.baseline = next_baseline
    return BatchRecord(
        objective,
        components,
        mean_reward=float(rewards.mean()) if rewards.size else 0.0,
        mean_kl=float(kl.mean()) if kl.size else 0.0,
        invalid=invalid,
    )


def _mean(values: Sequence[float]) -> float:
    return float(np.mean(values)) if values else 0.0


def _run_epoch(
    batch_fn: Callable[[Sequence[QAItem]], BatchRecord],
    items: Sequence[QAItem],
    epoch: int,
    config: ExperimentConfig,
    state: StageState,
    on_batch: Optional[Callable[[], None]],
) -> EpochReport:
    batch_size = config.stage(state.name).batch_size
    order = state.rng.permutation(len(items))
    records: list[BatchRecord] = []
    for start in range(0, len(items), batch_size):
        batch = [items[int(i)] for i in order[start : start + batch_size]]
        try:
            records.append(batch_fn(batch))
        except NumericError as exc:
            raise NumericError(
                f"{state.name} epoch {epoch} batch {start // batch_size}: {exc}"
            ) from exc
        if on_batch is not None:
            on_batch()
        if state.stopped:
            break
    stepped = [r for r in records if r.stepped]
    invalid = sum(r.invalid for r in records)
    if invalid:
        logger.info("%s epoch %d: %d invalid programs", state.name, epoch, invalid)
    return EpochReport(
        epoch=epoch,
        objective=_mean([r.objective for r in stepped]),
        mean_reward=_mean([r.mean_reward for r in stepped]),
        mean_kl=_mean([r.mean_kl for r in stepped]),
        batches=len(records),
        skipped_batches=len(records) - len(stepped),
        invalid_programs=invalid,
    )


def question_coding_epoch(
    bundle: ModelBundle,
    data: DatasetSplit,
    config: ExperimentConfig,
    state: StageState,
    *,
    epoch: int = 0,
    on_batch: Optional[Callable[[], None]] = None,
) -> EpochReport:
    """One pass over the training items; updates the inference and reconstructor.

    Raises:
        TrainingError: The prior is not frozen.
    """
    if not bundle.prior.frozen:
        raise TrainingError("question coding needs a pretrained, frozen prior")
    return _run_epoch(
        lambda batch: question_coding_batch(bundle, batch, config, state),
        data.train,
        epoch,
        config,
        state,
        on_batch,
    )


def module_training_epoch(
    bundle: ModelBundle,
    data: DatasetSplit,
    config: ExperimentConfig,
    state: StageState,
    *,
    epoch: int = 0,
    on_batch: Optional[Callable[[], None]] = None,
) -> EpochReport:
    """One pass fitting stem and modules; the inference network stays fixed."""
    return _run_epoch(
        lambda batch: module_training_batch(bundle, batch, data, config, state),
        data.train,
        epoch,
        config,
        state,
        on_batch,
    )


def joint_training_epoch(
    bundle: ModelBundle,
    data: DatasetSplit,
    config: ExperimentConfig,
    state: StageState,
    *,
    epoch: int = 0,
    on_batch: Optional[Callable[[], None]] = None,
) -> EpochReport:
    """One pass updating inference, reconstructor, stem and modules together."""
    if not bundle.prior.frozen:
        raise TrainingError("joint training needs a pretrained, frozen prior")
    return _run_epoch(
        lambda batch: joint_training_batch(bundle, batch, data, config, state),
        data.train,
        epoch,
        config,
        state,
        on_batch,
    )


EPOCH_FUNCTIONS = {
    "question_coding": question_coding_epoch,
    "module_training": module_training_epoch,
    "joint_training": joint_training_epoch,
}


def _validate(
    bundle: ModelBundle,
    data: DatasetSplit,
    config: ExperimentConfig,
    state: StageState,
    report: StageReport,
    sink: Optional[MetricSink],
) -> Metrics:
    metrics = compute_metrics(
        bundle,
        data,
        "val",
        max_program_len=config.data.max_program_len,
        max_question_len=config.data.max_question_len,
    )
    values = metrics.as_dict()
    report.validations.append({"step": state.step, **values})
    if sink is not None:
        for metric, value in values.items():
            sink(state.name, state.step, metric, value)
    logger.info(
        "%s step %d: program %.3f reconstruction %.3f vqa %.3f",
        state.name,
        state.step,
        metrics.program_accuracy,
        metrics.reconstruction_accuracy,
        metrics.vqa_accuracy,
    )

    stage = config.stage(state.name)
    score = values[PRIMARY_METRIC[state.name]]
    if score > state.best:
        state.best, state.bad_validations, state.halvings = score, 0, 0
    else:
        state.bad_validations += 1
        if state.bad_validations >= stage.patience:
            if state.halvings >= stage.max_halvings:
                logger.info(
                    "%s: no improvement after %d halvings, stopping",
                    state.name,
                    state.halvings,
                )
                state.stopped = True
            else:
                lr = state.optimizer.halve_lr()
                state.halvings += 1
                state.bad_validations = 0
                logger.warning(
                    "%s: validation plateau, learning rate halved to %g", state.name, lr
                )
    return metrics


def run_stage(
    name: str,
    bundle: ModelBundle,
    data: DatasetSplit,
    config: ExperimentConfig,
    *,
    sink: Optional[MetricSink] = None,
) -> StageReport:
    """Run all epochs of one stage with validation, lr halving and early stopping."""
    stage = config.stage(name)
    state = start_stage(name, bundle, config)
    report = StageReport(name)
    epoch_fn = EPOCH_FUNCTIONS[name]
    logger.info(
        "%s: %d epochs, lr %g, batch %d",
        name,
        stage.epochs,
        stage.lr,
        stage.batch_size,
    )

    latest: list[Metrics] = []

    def on_batch() -> None:
        every = stage.validate_every
        if every and state.step and state.step % every == 0:
            latest.append(_validate(bundle, data, config, state, report, sink))

    for epoch in range(stage.epochs):
        epoch_report = epoch_fn(
            bundle, data, config, state, epoch=epoch, on_batch=on_batch
        )
        if not stage.validate_every:
            latest.append(_validate(bundle, data, config, state, report, sink))
        epoch_report.metrics = latest[-1] if latest else None
        if sink is not None:
            sink(name, state.step, "objective", epoch_report.objective)
        report.epochs.append(epoch_report)
        if epoch_report.skipped_batches:
            logger.warning(
                "%s epoch %d: %d batches skipped",
                name,
                epoch,
                epoch_report.skipped_batches,
            )
        if state.stopped:
            report.stopped_early = True
            break
    report.final_lr = state.optimizer.lr
    return report
