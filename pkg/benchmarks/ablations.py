"""Directional ablations over several seeds.

Each comparison trains two variants from the same seed and records whether
the expected ordering holds. A comparison passes when the ordering holds for
a majority of seeds.

    python benchmarks/ablations.py --config configs/mini.toml --seeds 0 1 2

Comparisons:
    kl-program         question coding with beta=0.1 beats beta=0 on program accuracy
    kl-reconstruction  beta=0 beats beta=0.1 on question reconstruction
    kl-vqa             the full pipeline with beta=0.1 beats beta=0 on VQA accuracy
    semi-supervision   question coding on all questions beats coding on the
                       teaching pairs alone by at least 10 points
    module-warm-start  skipping module training hurts final program accuracy
    gamma-sweep        the best joint run over gamma in {1, 10, 100}, chosen on
                       validation, beats the module-training checkpoint on test
"""

from __future__ import annotations

import argparse
import json
import logging
import time
from dataclasses import replace
from typing import Callable

from latentprog import (
    DatasetSplit,
    ExperimentConfig,
    ModelBundle,
    Pipeline,
    build_dataset,
    compute_metrics,
    load_config,
)
from latentprog.grammar import ProgramVocab
from latentprog.pipeline import default_stages
from latentprog.shapes import question_vocab

logger = logging.getLogger("ablations")

GAMMAS = (1.0, 10.0, 100.0)


def build(config: ExperimentConfig) -> DatasetSplit:
    d = config.data
    return build_dataset(
        train_size=d.train_size,
        val_size=d.val_size,
        test_size=d.test_size,
        supervision_fraction=d.supervision_fraction,
        seed=config.seed,
        density=d.density,
        max_program_len=d.max_program_len,
        max_question_len=d.max_question_len,
        balance=d.balance_answers,
    )


def fresh(config: ExperimentConfig, data: DatasetSplit) -> ModelBundle:
    vocab = ProgramVocab.from_dict(data.meta["program_vocab"])
    return ModelBundle.initialize(vocab, question_vocab(), config.model, config.seed)


def metrics(
    bundle: ModelBundle, data: DatasetSplit, config: ExperimentConfig, split: str
):
    return compute_metrics(
        bundle,
        data,
        split,
        max_program_len=config.data.max_program_len,
        max_question_len=config.data.max_question_len,
    )


def with_beta(config: ExperimentConfig, beta: float) -> ExperimentConfig:
    return replace(config, hyperparams=replace(config.hyperparams, beta=beta))


def coded(config: ExperimentConfig, data: DatasetSplit) -> ModelBundle:
    bundle = fresh(config, data)
    Pipeline(["pretrain_prior", "question_coding"], config)(bundle, data)
    return bundle


def teaching_only(data: DatasetSplit) -> DatasetSplit:
    items = [i for i in data.items if i.split != "train" or i.teaching]
    return DatasetSplit(data.scenes, items, data.meta)


def kl_comparisons(config: ExperimentConfig, data: DatasetSplit) -> dict[str, bool]:
    with_kl = metrics(coded(config, data), data, config, "val")
    without = metrics(coded(with_beta(config, 0.0), data), data, config, "val")
    logger.info("beta=%.2f %s", config.hyperparams.beta, with_kl.as_dict())
    logger.info("beta=0.00 %s", without.as_dict())
    return {
        "kl-program": with_kl.program_accuracy > without.program_accuracy,
        "kl-reconstruction": without.reconstruction_accuracy
        > with_kl.reconstruction_accuracy,
    }


def kl_vqa(config: ExperimentConfig, data: DatasetSplit) -> bool:
    scores = []
    for variant in (config, with_beta(config, 0.0)):
        bundle = fresh(variant, data)
        Pipeline(default_stages(variant), variant)(bundle, data)
        scores.append(metrics(bundle, data, variant, "test").vqa_accuracy)
    return scores[0] > scores[1]


def semi_supervision(config: ExperimentConfig, data: DatasetSplit) -> bool:
    full = metrics(coded(config, data), data, config, "val").program_accuracy
    subset = coded(config, teaching_only(data))
    alone = metrics(subset, data, config, "val").program_accuracy
    logger.info("program accuracy: all %.3f teaching only %.3f", full, alone)
    return full - alone >= 0.10


def module_warm_start(config: ExperimentConfig, data: DatasetSplit) -> bool:
    scores = []
    for skip in (False, True):
        variant = replace(config, skip_module_training=skip)
        bundle = fresh(variant, data)
        Pipeline(default_stages(variant), variant)(bundle, data)
        scores.append(metrics(bundle, data, variant, "test").program_accuracy)
    return scores[0] > scores[1]


def gamma_sweep(config: ExperimentConfig, data: DatasetSplit) -> bool:
    base = fresh(config, data)
    stages = ["pretrain_prior", "question_coding", "module_training"]
    Pipeline(stages, config)(base, data)
    before = metrics(base, data, config, "test").vqa_accuracy
    best_val, best_test = -1.0, 0.0
    for gamma in GAMMAS:
        variant = replace(config, hyperparams=replace(config.hyperparams, gamma=gamma))
        bundle = base.clone()
        Pipeline(["joint_training"], variant)(bundle, data)
        val = metrics(bundle, data, variant, "val").vqa_accuracy
        logger.info("gamma=%g val vqa %.3f", gamma, val)
        if val > best_val:
            best_val = val
            best_test = metrics(bundle, data, variant, "test").vqa_accuracy
    return best_test > before


COMPARISONS: dict[str, Callable[[ExperimentConfig, DatasetSplit], dict[str, bool]]] = {
    "kl": kl_comparisons,
    "kl-vqa": lambda c, d: {"kl-vqa": kl_vqa(c, d)},
    "semi-supervision": lambda c, d: {"semi-supervision": semi_supervision(c, d)},
    "module-warm-start": lambda c, d: {"module-warm-start": module_warm_start(c, d)},
    "gamma-sweep": lambda c, d: {"gamma-sweep": gamma_sweep(c, d)},
}


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--config", default="configs/mini.toml")
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    parser.add_argument("--only", choices=sorted(COMPARISONS), nargs="*")
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s: %(message)s")

    print("=" * 70)
    print("Directional ablations")
    print("=" * 70)

    outcomes: dict[str, list[bool]] = {}
    for seed in args.seeds:
        config = load_config(args.config, {"seed": seed})
        data = build(config)
        for name in args.only or COMPARISONS:
            start = time.perf_counter()
            for key, held in COMPARISONS[name](config, data).items():
                outcomes.setdefault(key, []).append(held)
                outcome = "holds" if held else "fails"
                print(f"seed {seed} {key:20s} {outcome:6s}", end="")
            print(f"  ({time.perf_counter() - start:.1f} s)")

    print("-" * 70)
    verdicts = {}
    for key, held in outcomes.items():
        verdicts[key] = sum(held) * 2 > len(held)
        verdict = "PASS" if verdicts[key] else "FAIL"
        print(f"{key:20s} {sum(held)}/{len(held)} seeds  {verdict}")
    print(json.dumps(verdicts, sort_keys=True))


if __name__ == "__main__":
    main()
