"""The set of networks one experiment trains, with its run bookkeeping.

A :class:`ModelBundle` is what stages hand to each other and what checkpoints
store: the frozen prior, the question coder and reconstructor, the executor,
the stages completed so far and notes on events that changed the run.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from latentprog.autodiff import Tensor
from latentprog.config import ModelConfig
from latentprog.executor import CnnStem, ModuleBank
from latentprog.grammar import ProgramVocab
from latentprog.sequence import LanguageModel, Seq2Seq
from latentprog.vocab import Vocabulary

# Sub-streams of the master seed used for parameter initialization.
PRIOR_STREAM = 1
INFERENCE_STREAM = 2
RECONSTRUCTOR_STREAM = 3
EXECUTOR_STREAM = 4


@dataclass
class ModelBundle:
    """
    All models of one experiment plus the bookkeeping that flows through the
    training pipeline: which stage produced the weights and which stages ran.
    """

    program_vocab: ProgramVocab
    question_vocab: Vocabulary
    prior: LanguageModel
    inference: Seq2Seq
    reconstructor: Seq2Seq
    stem: CnnStem
    bank: ModuleBank
    seed: int = 0
    stage: str = "init"
    completed: list[str] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    @classmethod
    def initialize(
        cls,
        program_vocab: ProgramVocab,
        question_vocab: Vocabulary,
        config: ModelConfig | None = None,
        seed: int = 0,
    ) -> ModelBundle:
        """Fresh, seeded parameters for every model."""
        config = config or ModelConfig()
        dims = (config.embed_dim, config.hidden_dim)
        executor_rng = np.random.default_rng([seed, EXECUTOR_STREAM])
        return cls(
            program_vocab=program_vocab,
            question_vocab=question_vocab,
            prior=LanguageModel(
                program_vocab, *dims, np.random.default_rng([seed, PRIOR_STREAM])
            ),
            inference=Seq2Seq(
                question_vocab,
                program_vocab,
                *dims,
                np.random.default_rng([seed, INFERENCE_STREAM]),
                name="inference",
            ),
            reconstructor=Seq2Seq(
                program_vocab,
                question_vocab,
                *dims,
                np.random.default_rng([seed, RECONSTRUCTOR_STREAM]),
                name="reconstructor",
            ),
            stem=CnnStem(config.channels, executor_rng),
            bank=ModuleBank(program_vocab, config.channels, executor_rng),
            seed=seed,
        )

    def reinitialize_executor(self) -> None:
        """Fresh stem and module bank from the executor sub-stream."""
        rng = np.random.default_rng([self.seed, EXECUTOR_STREAM])
        self.stem = CnnStem(self.stem.channels, rng)
        self.bank = ModuleBank(self.program_vocab, self.bank.channels, rng)

    def parameters(self) -> dict[str, Tensor]:
        """Every named tensor, prior included."""
        return {
            **self.prior.parameters(),
            **self.inference.parameters(),
            **self.reconstructor.parameters(),
            **self.stem.parameters(),
            **self.bank.parameters(),
        }

    def mark_completed(self, stage: str) -> None:
        self.stage = stage
        if stage not in self.completed:
            self.completed.append(stage)

    def add_note(self, note: str) -> None:
        """Record a run event as ``"<stage>: <what happened>"``.

        Notes are stored in checkpoints and restored with the bundle.
        """
        self.notes.append(note)

    def clone(self) -> ModelBundle:
        """Deep copy, for branching experiments off one checkpoint."""
        return copy.deepcopy(self)
