"""Experiment configuration.

Settings come from three layers, highest first: CLI overrides, a TOML file,
built-in defaults. ``load_config`` merges them into a frozen
:class:`ExperimentConfig`; unknown keys and out-of-range values raise
:class:`~latentprog.exceptions.ConfigurationError`.

Example file::

    seed = 3
    [data]
    supervision_fraction = 0.1
    [hyperparams]
    beta = 0.1
    gamma = 10.0
    [joint_training]
    epochs = 4
"""

from __future__ import annotations

import dataclasses
import sys
from collections.abc import Mapping
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Optional, Union

from latentprog.exceptions import ConfigurationError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

__all__ = [
    "STAGES",
    "DataConfig",
    "ExperimentConfig",
    "Hyperparams",
    "ModelConfig",
    "PriorConfig",
    "ProbeConfig",
    "StageConfig",
    "config_to_dict",
    "load_config",
]

STAGES = ("question_coding", "module_training", "joint_training")


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise ConfigurationError(message)


@dataclass(frozen=True)
class DataConfig:
    train_size: int = 6000
    val_size: int = 600
    test_size: int = 600
    supervision_fraction: float = 0.1
    density: float = 0.5
    max_question_len: int = 15
    max_program_len: int = 7
    balance_answers: bool = True

    def __post_init__(self) -> None:
        _require(
            min(self.train_size, self.val_size, self.test_size) >= 1,
            "data sizes must be >= 1",
        )
        _require(
            0.0 < self.supervision_fraction <= 1.0,
            f"supervision_fraction must lie in (0, 1], got {self.supervision_fraction}",
        )
        _require(
            0.0 < self.density <= 1.0,
            f"density must lie in (0, 1], got {self.density}",
        )
        _require(self.max_program_len >= 2, "max_program_len must be >= 2")
        _require(self.max_question_len >= 1, "max_question_len must be >= 1")


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 32
    hidden_dim: int = 128
    channels: int = 64
    length_normalize: bool = False

    def __post_init__(self) -> None:
        _require(
            min(self.embed_dim, self.hidden_dim, self.channels) >= 1,
            "model dimensions must be >= 1",
        )


@dataclass(frozen=True)
class PriorConfig:
    mode: str = "syntactic"
    steps: int = 2000
    batch_size: int = 64
    lr: float = 1e-3

    def __post_init__(self) -> None:
        _require(
            self.mode in ("syntactic", "empirical"),
            f"prior.mode must be 'syntactic' or 'empirical', got {self.mode!r}",
        )
        _require(self.steps >= 0, f"prior.steps must be >= 0, got {self.steps}")
        _require(self.batch_size >= 1, "prior.batch_size must be >= 1")
        _require(self.lr > 0, f"prior.lr must be > 0, got {self.lr}")


@dataclass(frozen=True)
class StageConfig:
    """Loop settings for one training stage.

    Attributes:
        epochs: Passes over the stage's training items.
        lr: ADAM learning rate at stage start.
        batch_size: Items per optimizer step.
        validate_every: Batches between validations (0 = once per epoch).
        patience: Validations without improvement before the lr is halved.
        max_halvings: Halvings without improvement before the stage stops.
        program_source: ``greedy`` or ``sample`` (module training only).
    """

    epochs: int = 10
    lr: float = 1e-3
    batch_size: int = 64
    validate_every: int = 0
    patience: int = 3
    max_halvings: int = 3
    program_source: str = "greedy"

    def __post_init__(self) -> None:
        _require(self.epochs >= 0, f"epochs must be >= 0, got {self.epochs}")
        _require(self.lr > 0, f"lr must be > 0, got {self.lr}")
        _require(
            self.batch_size >= 1,
            f"batch_size must be >= 1, got {self.batch_size}",
        )
        _require(self.validate_every >= 0, "validate_every must be >= 0")
        _require(self.patience >= 1, "patience must be >= 1")
        _require(self.max_halvings >= 0, "max_halvings must be >= 0")
        _require(
            self.program_source in ("greedy", "sample"),
            f"program_source must be 'greedy' or 'sample', got {self.program_source!r}",
        )


@dataclass(frozen=True)
class Hyperparams:
    """Objective scales and estimator settings shared by all stages.

    Attributes:
        alpha: Scale on the supervised log q(z|x) term (> 1).
        beta: Scale on the sampled KL estimate (>= 0).
        gamma: Scale on the answer likelihood in joint training (>= 1).
        baseline_decay: D in b <- b + D * (R - b).
        samples: Program samples per item for Monte-Carlo expectations.
        invalid_reward: Answer term assigned to syntactically invalid samples.
        scale_reconstruction_with_alpha: Also scale supervised log p(x|z) by alpha.
    """

    alpha: float = 100.0
    beta: float = 0.1
    gamma: float = 10.0
    baseline_decay: float = 0.99
    samples: int = 1
    invalid_reward: float = -10.0
    scale_reconstruction_with_alpha: bool = False

    def __post_init__(self) -> None:
        _require(self.alpha > 1.0, f"alpha must be > 1, got {self.alpha}")
        _require(self.beta >= 0.0, f"beta must be >= 0, got {self.beta}")
        _require(self.gamma >= 1.0, f"gamma must be >= 1, got {self.gamma}")
        _require(
            0.0 <= self.baseline_decay <= 1.0,
            f"baseline_decay must lie in [0, 1], got {self.baseline_decay}",
        )
        _require(
            1 <= self.samples <= 5,
            f"samples must lie in [1, 5], got {self.samples}",
        )


@dataclass(frozen=True)
class ProbeConfig:
    n_draws: int = 2000
    top_k: int = 10
    n_samples: int = 20

    def __post_init__(self) -> None:
        _require(self.n_draws >= 1, "probe.n_draws must be >= 1")
        _require(self.top_k >= 1, "probe.top_k must be >= 1")
        _require(self.n_samples >= 1, "probe.n_samples must be >= 1")


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    workers: int = 1
    check_finite: bool = True
    allow_cold_start: bool = False
    skip_module_training: bool = False
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    prior: PriorConfig = field(default_factory=PriorConfig)
    hyperparams: Hyperparams = field(default_factory=Hyperparams)
    question_coding: StageConfig = field(default_factory=StageConfig)
    module_training: StageConfig = field(default_factory=StageConfig)
    joint_training: StageConfig = field(default_factory=StageConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)

    def __post_init__(self) -> None:
        _require(self.workers >= 1, f"workers must be >= 1, got {self.workers}")

    def stage(self, name: str) -> StageConfig:
        if name not in STAGES:
            raise ConfigurationError(
                f"Unknown stage {name!r}; expected one of {STAGES}"
            )
        config: StageConfig = getattr(self, name)
        return config


_SECTIONS = (
    "data",
    "model",
    "prior",
    "hyperparams",
    "question_coding",
    "module_training",
    "joint_training",
    "probe",
)


def _coerce(owner: str, name: str, default: Any, value: Any) -> Any:
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigurationError(f"{owner}.{name} must be a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigurationError(
                f"{owner}.{name} must be an integer, got {value!r}"
            )
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"{owner}.{name} must be a number, got {value!r}")
        return float(value)
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigurationError(f"{owner}.{name} must be a string, got {value!r}")
    return value


def _apply(instance: Any, owner: str, values: Mapping[str, Any]) -> Any:
    known = {f.name: getattr(instance, f.name) for f in fields(instance)}
    changes = {}
    for key, value in values.items():
        if key not in known:
            raise ConfigurationError(
                f"Unknown key '{owner}.{key}'. Known: {', '.join(sorted(known))}"
            )
        changes[key] = _coerce(owner, key, known[key], value)
    return replace(instance, **changes)


def _nest(flat: Mapping[str, Any]) -> dict[str, Any]:
    nested: dict[str, Any] = {}
    for dotted, value in flat.items():
        if value is None:
            continue
        head, _, tail = dotted.partition(".")
        if tail:
            nested.setdefault(head, {})[tail] = value
        else:
            nested[head] = value
    return nested


def _merge(
    config: ExperimentConfig, source: Mapping[str, Any], origin: str
) -> ExperimentConfig:
    top: dict[str, Any] = {}
    sections: dict[str, Any] = {}
    for key, value in source.items():
        if key in _SECTIONS:
            if not isinstance(value, Mapping):
                raise ConfigurationError(f"[{key}] in {origin} must be a table")
            sections[key] = _apply(getattr(config, key), key, value)
        elif isinstance(value, Mapping):
            raise ConfigurationError(f"Unknown section [{key}] in {origin}")
        else:
            top[key] = value
    config = replace(config, **sections)
    return _apply(config, "config", top) if top else config


def load_config(
    path: Optional[Union[str, Path]] = None,
    overrides: Optional[Mapping[str, Any]] = None,
) -> ExperimentConfig:
    """Resolve defaults, then the TOML file at ``path``, then ``overrides``.

    ``overrides`` uses dotted keys (``"hyperparams.beta"``, ``"seed"``);
    ``None`` values are ignored so unset CLI flags fall through.

    Raises:
        ConfigurationError: Unreadable file, invalid TOML, unknown key, or an
            out-of-range value.
    """
    config = ExperimentConfig()
    if path is not None:
        path = Path(path)
        try:
            with path.open("rb") as handle:
                data = tomllib.load(handle)
        except OSError as exc:
            raise ConfigurationError(f"Cannot read config file {path}: {exc}") from exc
        except tomllib.TOMLDecodeError as exc:
            raise ConfigurationError(f"Invalid TOML in {path}: {exc}") from exc
        config = _merge(config, data, str(path))
    if overrides:
        config = _merge(config, _nest(overrides), "command-line overrides")
    return config


def config_to_dict(config: ExperimentConfig) -> dict[str, Any]:
    """Plain nested dict (TOML/JSON friendly)."""
    return dataclasses.asdict(config)
