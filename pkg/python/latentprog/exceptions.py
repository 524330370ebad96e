"""Exception hierarchy for latentprog.

Provides a structured exception hierarchy so callers can tell apart
configuration mistakes, numerical failures, malformed programs and broken
files without parsing messages.

Exception Hierarchy:
    LatentProgError
    ├── ConfigurationError
    ├── ShapeError
    ├── NumericError
    ├── TapeError
    ├── FrozenParameterError
    ├── GrammarError
    │   ├── UnknownTokenError
    │   ├── ProgramParseError
    │   └── ProgramStructureError
    ├── ExecutionError
    ├── DatasetError
    ├── CheckpointError
    │   ├── CheckpointIntegrityError
    │   └── CheckpointMismatchError
    ├── TrainingError
    └── PipelineError

Usage:
    >>> from latentprog.exceptions import GrammarError, LatentProgError
    >>> try:
    ...     tree = parse_to_tree(tokens, vocab)
    ... except GrammarError as e:
    ...     logger.warning("dropping program: %s", e)
    ... except LatentProgError:
    ...     raise
"""

from __future__ import annotations

from typing import TYPE_CHECKING

if TYPE_CHECKING:
    from latentprog.grammar import Verdict


class LatentProgError(Exception):
    """Base exception for all latentprog errors.

    Catching this class catches every error raised deliberately by the
    package.
    """


class ConfigurationError(LatentProgError):
    """Raised when a setting is invalid, out of range, or unknown.

    Examples:
        >>> Hyperparams(alpha=0.5)
        Traceback (most recent call last):
        ...
        latentprog.exceptions.ConfigurationError: alpha must be > 1, got 0.5
    """


class ShapeError(LatentProgError):
    """Raised when tensor shapes do not conform to an op's shape rule.

    The message names the op kind and the offending shapes.

    Examples:
        >>> a, b = Tensor(np.ones((2, 3))), Tensor(np.ones((2, 1)))
        >>> apply_primitive("matmul", [a, b])
        Traceback (most recent call last):
        ...
        latentprog.exceptions.ShapeError: matmul: cannot multiply (2, 3) by (2, 1)
    """


class NumericError(LatentProgError):
    """Raised when NaN or Inf reaches an op boundary or the optimizer."""


class TapeError(LatentProgError):
    """Raised on misuse of a computation tape.

    Covers non-scalar losses, losses that were not recorded on the tape, and
    a second backward pass over an already consumed tape.
    """


class FrozenParameterError(LatentProgError):
    """Raised when a gradient is written to, or a step applied to, a frozen
    parameter (the pretrained program prior)."""


class GrammarError(LatentProgError):
    """Base class for program grammar failures."""


class UnknownTokenError(GrammarError):
    """Raised when a token is not part of the vocabulary.

    Attributes:
        token: The offending token.
        position: 1-based position of the token in its sequence.
    """

    def __init__(self, token: str, position: int):
        super().__init__(f"Unknown token {token!r} at position {position}")
        self.token = token
        self.position = position


class ProgramParseError(GrammarError):
    """Raised when a token sequence is not a valid prefix serialization.

    Attributes:
        verdict: The validator verdict explaining the failure.
    """

    def __init__(self, verdict: Verdict):
        super().__init__(f"Invalid program: {verdict.reason}")
        self.verdict = verdict


class ProgramStructureError(GrammarError):
    """Raised when a program tree violates arity or root-kind rules."""


class ExecutionError(LatentProgError):
    """Raised when a program cannot be executed (neural or symbolic)."""


class DatasetError(LatentProgError):
    """Raised when dataset files are missing, malformed or inconsistent."""


class CheckpointError(LatentProgError):
    """Base class for checkpoint read/write failures."""


class CheckpointIntegrityError(CheckpointError):
    """Raised when a checkpoint file is truncated, tampered or corrupt."""


class CheckpointMismatchError(CheckpointError):
    """Raised when a checkpoint's format version or vocabularies differ from
    what the caller expects.

    Attributes:
        differences: Human-readable summary lines of the mismatch.
    """

    def __init__(self, message: str, differences: list[str] | None = None):
        details = differences or []
        if details:
            message = message + "\n  " + "\n  ".join(details)
        super().__init__(message)
        self.differences = details


class TrainingError(LatentProgError):
    """Raised when a training stage cannot proceed.

    Numeric failures inside a stage are re-raised as this error carrying the
    batch index.
    """


class PipelineError(LatentProgError):
    """Raised when the staged training pipeline is misused or a stage fails.

    Examples:
        >>> Pipeline(["joint_training"], config)(bundle, data)
        Traceback (most recent call last):
        ...
        latentprog.exceptions.PipelineError: Stage 'joint_training' requires ...
    """
