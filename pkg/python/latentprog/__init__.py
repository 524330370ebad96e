"""latentprog: latent-program visual question answering on a synthetic shapes world."""

from __future__ import annotations

from importlib import metadata

from .autodiff import Tape, Tensor, backward, suspend_tape
from .config import ExperimentConfig, load_config
from .context import ModelBundle
from .exceptions import (
    CheckpointError,
    CheckpointIntegrityError,
    CheckpointMismatchError,
    ConfigurationError,
    DatasetError,
    ExecutionError,
    FrozenParameterError,
    GrammarError,
    LatentProgError,
    NumericError,
    PipelineError,
    ProgramParseError,
    ProgramStructureError,
    ShapeError,
    TapeError,
    TrainingError,
    UnknownTokenError,
)
from .executor import (
    CnnStem,
    ExecutionTrace,
    ModuleBank,
    answer_log_prob,
    execute_program,
    rig_oracle_executor,
)
from .gradcheck import GradCheckReport, gradient_check, gradient_suite
from .grammar import (
    ModuleKind,
    ProgramVocab,
    Verdict,
    default_program_vocab,
    enumerate_programs,
    is_valid_program,
    parse_to_tree,
    serialize_tree,
    simulate_program,
    validate_prefix,
)
from .info import experiment_fingerprint, get_build_info, print_reproducibility_report
from .optim import Adam, AdamState, adam_step
from .persistence import (
    Checkpoint,
    MetricsLog,
    bundle_from_checkpoint,
    load_checkpoint,
    load_dataset,
    save_checkpoint,
    save_dataset,
)
from .pipeline import STAGE_REGISTRY, Pipeline, PipelineReport, run_pipeline
from .probe import (
    Metrics,
    ProbeResult,
    compute_metrics,
    posterior_probe,
    predict_answer,
)
from .sequence import (
    LanguageModel,
    Seq2Seq,
    SequenceDistribution,
    greedy_decode,
    lm_log_prob,
    pretrain_prior,
    sample_sequence,
    seq2seq_log_prob,
)
from .shapes import (
    ANSWERS,
    DatasetSplit,
    QAItem,
    Scene,
    build_dataset,
    generate_qa,
    question_to_program,
    realize_question,
    render_scene,
    symbolic_execute,
)
from .training import (
    BaselineState,
    reinforce_grad,
    reinforce_surrogate,
    run_stage,
    update_baseline,
)
from .vocab import Vocabulary

__all__ = [
    "__version__",
    "ANSWERS",
    "Adam",
    "AdamState",
    "BaselineState",
    "Checkpoint",
    "CheckpointError",
    "CheckpointIntegrityError",
    "CheckpointMismatchError",
    "CnnStem",
    "ConfigurationError",
    "DatasetError",
    "DatasetSplit",
    "ExecutionError",
    "ExecutionTrace",
    "ExperimentConfig",
    "FrozenParameterError",
    "GradCheckReport",
    "GrammarError",
    "LanguageModel",
    "LatentProgError",
    "Metrics",
    "MetricsLog",
    "ModelBundle",
    "ModuleBank",
    "ModuleKind",
    "NumericError",
    "Pipeline",
    "PipelineError",
    "PipelineReport",
    "ProbeResult",
    "ProgramParseError",
    "ProgramStructureError",
    "ProgramVocab",
    "QAItem",
    "STAGE_REGISTRY",
    "Scene",
    "Seq2Seq",
    "SequenceDistribution",
    "ShapeError",
    "Tape",
    "TapeError",
    "Tensor",
    "TrainingError",
    "UnknownTokenError",
    "Verdict",
    "Vocabulary",
    "adam_step",
    "answer_log_prob",
    "backward",
    "build_dataset",
    "bundle_from_checkpoint",
    "compute_metrics",
    "default_program_vocab",
    "enumerate_programs",
    "execute_program",
    "experiment_fingerprint",
    "generate_qa",
    "get_build_info",
    "gradient_check",
    "gradient_suite",
    "greedy_decode",
    "is_valid_program",
    "lm_log_prob",
    "load_checkpoint",
    "load_config",
    "load_dataset",
    "parse_to_tree",
    "posterior_probe",
    "predict_answer",
    "pretrain_prior",
    "print_reproducibility_report",
    "question_to_program",
    "realize_question",
    "reinforce_grad",
    "reinforce_surrogate",
    "render_scene",
    "rig_oracle_executor",
    "run_pipeline",
    "run_stage",
    "sample_sequence",
    "save_checkpoint",
    "save_dataset",
    "seq2seq_log_prob",
    "serialize_tree",
    "simulate_program",
    "suspend_tape",
    "symbolic_execute",
    "update_baseline",
    "validate_prefix",
]

try:
    __version__ = metadata.version("latentprog")
except metadata.PackageNotFoundError:  # pragma: no cover - fallback during dev installs
    __version__ = "0.1.0"
