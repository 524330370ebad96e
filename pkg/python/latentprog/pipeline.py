"""Staged training pipeline: prior pretraining, then the three training stages."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional, Union

import numpy as np

from latentprog.autodiff import set_finite_checks
from latentprog.config import ExperimentConfig, config_to_dict
from latentprog.context import ModelBundle
from latentprog.exceptions import ConfigurationError, PipelineError
from latentprog.grammar import ProgramVocab, simulate_program
from latentprog.persistence import MetricsLog, save_checkpoint
from latentprog.probe import Metrics, compute_metrics
from latentprog.sequence import pretrain_prior
from latentprog.shapes import DatasetSplit, question_vocab
from latentprog.training import MetricSink, StageReport, run_stage

logger = logging.getLogger(__name__)

PRETRAIN_STREAM = 9

StageFn = Callable[
    [ModelBundle, DatasetSplit, ExperimentConfig, Optional[MetricSink]],
    Optional[StageReport],
]


def pretrain_prior_stage(
    bundle: ModelBundle,
    data: DatasetSplit,
    config: ExperimentConfig,
    sink: Optional[MetricSink] = None,
) -> None:
    """Fit and freeze the program prior (syntactic or empirical)."""
    prior = config.prior
    max_len = config.data.max_program_len
    vocab = bundle.program_vocab
    pretrain_prior(
        bundle.prior,
        np.random.default_rng([config.seed, PRETRAIN_STREAM]),
        mode=prior.mode,
        simulate=lambda rng: simulate_program(vocab, rng, max_len),
        corpus=[item.program for item in data.teaching],
        steps=prior.steps,
        batch_size=prior.batch_size,
        lr=prior.lr,
        max_len=max_len,
    )
    return None


def _training_stage(name: str) -> StageFn:
    def stage(
        bundle: ModelBundle,
        data: DatasetSplit,
        config: ExperimentConfig,
        sink: Optional[MetricSink] = None,
    ) -> StageReport:
        if name == "joint_training" and "module_training" not in bundle.completed:
            logger.warning(
                "joint training without module training: stem and modules "
                "re-initialized from seed %d",
                bundle.seed,
            )
            bundle.reinitialize_executor()
            bundle.add_note(
                "joint_training: stem and modules re-initialized "
                f"from seed {bundle.seed}"
            )
        report = run_stage(name, bundle, data, config, sink=sink)
        if report.stopped_early:
            bundle.add_note(f"{name}: stopped early after {len(report.epochs)} epochs")
        return report

    stage.__name__ = name
    return stage


STAGE_REGISTRY: dict[str, StageFn] = {
    "pretrain_prior": pretrain_prior_stage,
    "question_coding": _training_stage("question_coding"),
    "module_training": _training_stage("module_training"),
    "joint_training": _training_stage("joint_training"),
}

PREREQUISITES: dict[str, tuple[str, ...]] = {
    "pretrain_prior": (),
    "question_coding": ("pretrain_prior",),
    "module_training": ("question_coding",),
    "joint_training": ("question_coding", "module_training"),
}

StageType = Union[str, StageFn]


@dataclass
class PipelineReport:
    stages: dict[str, Optional[StageReport]] = field(default_factory=dict)
    checkpoints: dict[str, Path] = field(default_factory=dict)
    test_metrics: Optional[Metrics] = None

    def summary(self) -> dict[str, Any]:
        return {
            "stages": list(self.stages),
            "checkpoints": {k: str(v) for k, v in self.checkpoints.items()},
            "test": self.test_metrics.as_dict() if self.test_metrics else None,
        }


class Pipeline:
    """
    Ordered training stages over one model bundle.

    Args:
        stages: Stage names from :data:`STAGE_REGISTRY` or callables
        config: Resolved experiment configuration
        out_dir: Where per-stage checkpoints and ``metrics.jsonl`` go

    Raises:
        ConfigurationError: If stages list is empty or contains unknown stage names

    Examples:
        >>> pipeline = Pipeline(["question_coding", "module_training"], config)
        >>> report = pipeline(bundle, data)
    """

    def __init__(
        self,
        stages: list[StageType],
        config: ExperimentConfig,
        out_dir: Optional[Union[str, Path]] = None,
    ):
        if not stages:
            raise ConfigurationError("Pipeline must have at least one stage")
        self.config = config
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.stage_names: list[str] = []
        self.stages: list[StageFn] = []
        for stage in stages:
            if callable(stage):
                self.stage_names.append(getattr(stage, "__name__", repr(stage)))
                self.stages.append(stage)
            elif isinstance(stage, str):
                if stage not in STAGE_REGISTRY:
                    raise ConfigurationError(
                        f"Unknown pipeline stage: '{stage}'. "
                        f"Available stages: {', '.join(STAGE_REGISTRY)}"
                    )
                self.stage_names.append(stage)
                self.stages.append(STAGE_REGISTRY[stage])
            else:
                raise ConfigurationError(
                    "Pipeline stage must be a string or callable, "
                    f"got {type(stage).__name__}"
                )

    def _check_prerequisites(self, name: str, bundle: ModelBundle) -> None:
        if self.config.allow_cold_start:
            return
        waived = {"module_training"} if self.config.skip_module_training else set()
        missing = [
            p
            for p in PREREQUISITES.get(name, ())
            if p not in bundle.completed and p not in waived
        ]
        if missing:
            raise PipelineError(
                f"Stage '{name}' requires {', '.join(missing)}; run it first "
                f"or pass --allow-cold-start"
            )

    def __call__(self, bundle: ModelBundle, data: DatasetSplit) -> PipelineReport:
        """
        Run every stage in order, checkpointing after each one.

        Raises:
            PipelineError: If a prerequisite is missing or a stage fails
        """
        set_finite_checks(self.config.check_finite)
        sink = MetricsLog(self.out_dir / "metrics.jsonl") if self.out_dir else None
        report = PipelineReport()
        for name, stage in zip(self.stage_names, self.stages):
            self._check_prerequisites(name, bundle)
            logger.info("stage %s starting", name)
            try:
                report.stages[name] = stage(bundle, data, self.config, sink)
            except PipelineError:
                raise
            except Exception as e:
                raise PipelineError(f"Pipeline stage '{name}' failed: {e}") from e
            bundle.mark_completed(name)
            if self.out_dir is not None:
                report.checkpoints[name] = save_checkpoint(
                    self.out_dir / f"{name}.ckpt", bundle, config_to_dict(self.config)
                )
        return report

    def __repr__(self) -> str:
        return f"Pipeline([{', '.join(repr(name) for name in self.stage_names)}])"


def default_stages(config: ExperimentConfig) -> list[str]:
    stages = ["pretrain_prior", "question_coding", "module_training", "joint_training"]
    if config.skip_module_training:
        stages.remove("module_training")
    return stages


def run_pipeline(
    config: ExperimentConfig,
    data: DatasetSplit,
    *,
    bundle: Optional[ModelBundle] = None,
    out_dir: Optional[Union[str, Path]] = None,
) -> tuple[ModelBundle, PipelineReport]:
    """Run the remaining stages in order, then evaluate on the test split.

    Stages already listed in ``bundle.completed`` (a resumed checkpoint) are
    skipped; each remaining stage draws from its own seed-derived stream, so a
    resumed run reproduces an uninterrupted one.
    """
    if bundle is None:
        vocab = ProgramVocab.from_dict(data.meta["program_vocab"])
        bundle = ModelBundle.initialize(
            vocab, question_vocab(), config.model, config.seed
        )
    stages = [s for s in default_stages(config) if s not in bundle.completed]
    report = PipelineReport()
    if stages:
        report = Pipeline(stages, config, out_dir)(bundle, data)
    report.test_metrics = compute_metrics(
        bundle,
        data,
        "test",
        max_program_len=config.data.max_program_len,
        max_question_len=config.data.max_question_len,
    )
    logger.info("test metrics: %s", report.test_metrics.as_dict())
    return bundle, report
