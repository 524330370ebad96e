"""
Reproducibility and build information.

Functions here report the package and numerical-library versions and a
fingerprint of an experiment's resolved configuration, so a result can be
tied to the exact setup that produced it.

Example:
    >>> from latentprog import get_build_info, print_reproducibility_report
    >>> get_build_info()["latentprog_version"]
    '0.1.0'
    >>> print_reproducibility_report()
"""

from __future__ import annotations

import hashlib
import json
import platform
from typing import Optional

import numpy as np

from latentprog.config import ExperimentConfig, config_to_dict
from latentprog.grammar import ProgramVocab, default_program_vocab
from latentprog.shapes import question_vocab
from latentprog.vocab import Vocabulary


def get_build_info() -> dict[str, str]:
    """Package, interpreter and numpy versions.

    Returns:
        dict: ``latentprog_version``, ``python_version``, ``numpy_version``
        and ``platform``.
    """
    from latentprog import __version__

    return {
        "latentprog_version": __version__,
        "python_version": platform.python_version(),
        "numpy_version": np.__version__,
        "platform": platform.platform(terse=True),
    }


def experiment_fingerprint(
    config: ExperimentConfig,
    program_vocab: Optional[ProgramVocab] = None,
    questions: Optional[Vocabulary] = None,
) -> str:
    """SHA256 over the resolved config, both vocabulary hashes and the worker count.

    Two runs with the same fingerprint are expected to produce bit-identical
    checkpoints and metric logs.
    """
    program_vocab = program_vocab or default_program_vocab()
    questions = questions or question_vocab()
    payload = {
        "config": config_to_dict(config),
        "program_vocab": program_vocab.fingerprint(),
        "question_vocab": questions.fingerprint(),
        "workers": config.workers,
    }
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def print_reproducibility_report(config: Optional[ExperimentConfig] = None) -> None:
    """Print build information and, with ``config``, the experiment fingerprint.

    Example:
        >>> print_reproducibility_report()

        ====================================================
        latentprog Reproducibility Report
        ====================================================

        Build Information:
        --------------------------------------------------
          latentprog_version  : 0.1.0
          numpy_version       : 1.26.4
          ...
    """
    build_info = get_build_info()
    program_vocab = default_program_vocab()
    questions = question_vocab()

    print()
    print("=" * 52)
    print("latentprog Reproducibility Report")
    print("=" * 52)

    print("\nBuild Information:")
    print("-" * 50)
    for key, value in sorted(build_info.items()):
        print(f"  {key:20}: {value}")

    print("\nVocabularies:")
    print("-" * 50)
    print(f"  {'program_tokens':20}: {len(program_vocab)}")
    print(f"  {'program_hash':20}: {program_vocab.fingerprint()[:16]}...")
    print(f"  {'question_tokens':20}: {len(questions)}")
    print(f"  {'question_hash':20}: {questions.fingerprint()[:16]}...")

    if config is not None:
        print("\nExperiment:")
        print("-" * 50)
        print(f"  {'seed':20}: {config.seed}")
        print(f"  {'workers':20}: {config.workers}")
        print(f"  {'fingerprint':20}: {experiment_fingerprint(config)}")

    print()


__all__ = [
    "experiment_fingerprint",
    "get_build_info",
    "print_reproducibility_report",
]
