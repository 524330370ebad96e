"""Command-line interface for latentprog.

Generates the shapes dataset, runs each training stage or the whole pipeline,
evaluates checkpoints and runs the posterior probe.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import functools
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any, Callable, Optional

import click
import numpy as np

from latentprog.autodiff import suspend_tape
from latentprog.config import STAGES, ExperimentConfig, load_config
from latentprog.context import ModelBundle
from latentprog.exceptions import ConfigurationError, LatentProgError
from latentprog.executor import execute_program, rig_oracle_executor
from latentprog.gradcheck import gradient_suite
from latentprog.grammar import ProgramVocab, default_program_vocab, is_valid_program
from latentprog.info import print_reproducibility_report
from latentprog.persistence import (
    bundle_from_checkpoint,
    load_checkpoint,
    load_dataset,
    save_dataset,
)
from latentprog.pipeline import Pipeline, pretrain_prior_stage, run_pipeline
from latentprog.probe import compute_metrics, posterior_probe
from latentprog.sequence import greedy_decode
from latentprog.shapes import ANSWERS, DatasetSplit, build_dataset, question_vocab

try:
    from latentprog import __version__
except ImportError:
    __version__ = "0.1.0"

logger = logging.getLogger(__name__)


class ExperimentGroup(click.Group):
    """Click group that maps usage errors to exit 1 and library errors to exit 2."""

    def main(  # type: ignore[override]
        self,
        args: Optional[list[str]] = None,
        prog_name: Optional[str] = None,
        complete_var: Optional[str] = None,
        standalone_mode: bool = True,
        **extra: Any,
    ) -> int:
        try:
            rv = super().main(
                args, prog_name, complete_var, standalone_mode=False, **extra
            )
            code = rv if isinstance(rv, int) else 0
        except click.Abort:
            click.echo("Aborted!", err=True)
            code = 1
        except click.ClickException as exc:
            exc.show()
            code = 1
        except LatentProgError as exc:
            click.echo(f"Error: {exc}", err=True)
            code = 2
        if standalone_mode:
            sys.exit(code)
        return code


def experiment_options(f: Callable[..., Any]) -> Callable[..., Any]:
    """Shared config flags; the command receives the resolved ``config``."""

    @functools.wraps(f)
    def wrapper(
        config_path: Optional[str],
        seed: Optional[int],
        workers: Optional[int],
        supervision_fraction: Optional[float],
        alpha: Optional[float],
        beta: Optional[float],
        gamma: Optional[float],
        batch_size: Optional[int],
        samples: Optional[int],
        allow_cold_start: Optional[bool],
        length_normalize: Optional[bool],
        **kwargs: Any,
    ) -> Any:
        overrides: dict[str, Any] = {
            "seed": seed,
            "workers": workers,
            "allow_cold_start": True if allow_cold_start else None,
            "data.supervision_fraction": supervision_fraction,
            "model.length_normalize": True if length_normalize else None,
            "hyperparams.alpha": alpha,
            "hyperparams.beta": beta,
            "hyperparams.gamma": gamma,
            "hyperparams.samples": samples,
        }
        for stage in STAGES:
            overrides[f"{stage}.batch_size"] = batch_size
        config = load_config(config_path, overrides)
        return f(config=config, **kwargs)

    options = [
        click.option(
            "--config",
            "config_path",
            type=click.Path(exists=True, dir_okay=False),
            help="TOML experiment file (flags override it)",
        ),
        click.option("--seed", type=int, help="Master seed"),
        click.option("--workers", type=int, help="Worker threads for the probe"),
        click.option(
            "--supervision-fraction", type=float, help="Teaching fraction of train"
        ),
        click.option("--alpha", type=float, help="Supervised program term scale"),
        click.option("--beta", type=float, help="KL scale"),
        click.option("--gamma", type=float, help="Answer likelihood scale"),
        click.option("--batch-size", type=int, help="Batch size for every stage"),
        click.option("--samples", type=int, help="Program samples per item"),
        click.option(
            "--allow-cold-start",
            is_flag=True,
            default=None,
            help="Run a stage without its prerequisite stages",
        ),
        click.option(
            "--length-normalize",
            is_flag=True,
            default=None,
            help="Average sequence log-probabilities over steps",
        ),
    ]
    for option in reversed(options):
        wrapper = option(wrapper)
    return wrapper


def _program_vocab(data: Optional[DatasetSplit]) -> ProgramVocab:
    if data is None:
        return default_program_vocab()
    return ProgramVocab.from_dict(data.meta["program_vocab"])


def _build(config: ExperimentConfig) -> DatasetSplit:
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


def _dataset(data_dir: Optional[str], config: ExperimentConfig) -> DatasetSplit:
    if data_dir is not None:
        return load_dataset(data_dir)
    logger.info("no --data-dir given; generating the dataset in memory")
    return _build(config)


def _bundle(
    ckpt: Optional[str], config: ExperimentConfig, data: Optional[DatasetSplit]
) -> ModelBundle:
    vocab = _program_vocab(data)
    if ckpt is None:
        return ModelBundle.initialize(
            vocab, question_vocab(), config.model, config.seed
        )
    checkpoint = load_checkpoint(
        ckpt, program_vocab=vocab, question_vocab=question_vocab()
    )
    bundle = bundle_from_checkpoint(checkpoint)
    logger.info("loaded %s (stage %s)", ckpt, bundle.stage)
    return bundle


@click.group(cls=ExperimentGroup)
@click.version_option(version=__version__)
@click.option("--verbose", "-v", is_flag=True, help="Debug logging")
def cli(verbose: bool) -> None:
    """latentprog - latent-program visual question answering.

    A program prior, a question coder and a neural module executor trained
    in three stages on a synthetic shapes world.
    """
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
        force=True,
    )


@cli.command(name="generate-data")
@click.option("--out", "-o", type=click.Path(file_okay=False), required=True)
@experiment_options
def generate_data(config: ExperimentConfig, out: str) -> None:
    """Generate train/val/test scenes and questions.

    Example:
        latentprog generate-data --seed 0 --out data/
    """
    data = _build(config)
    save_dataset(data, out)
    click.echo(
        f"{len(data.items)} items ({data.meta['teaching_count']} teaching) "
        f"written to {out}"
    )


def _stage_command(stage: str, doc: str) -> None:
    @click.option("--data-dir", type=click.Path(exists=True, file_okay=False))
    @click.option(
        "--ckpt", type=click.Path(exists=True, dir_okay=False), help="Start from"
    )
    @click.option("--out", "-o", type=click.Path(file_okay=False), default="runs")
    @experiment_options
    def command(
        config: ExperimentConfig, data_dir: Optional[str], ckpt: Optional[str], out: str
    ) -> None:
        data = _dataset(data_dir, config)
        bundle = _bundle(ckpt, config, data)
        report = Pipeline([stage], config, out)(bundle, data)
        click.echo(f"{stage} done; checkpoint {report.checkpoints[stage]}")
        stage_report = report.stages[stage]
        if stage_report is not None and stage_report.last_metrics is not None:
            click.echo(json.dumps(stage_report.last_metrics.as_dict(), sort_keys=True))

    command.__doc__ = doc
    cli.command(name=stage.replace("_", "-"))(command)


_stage_command("pretrain_prior", "Fit and freeze the program prior.")
_stage_command("question_coding", "Train the question coder against the frozen prior.")
_stage_command("module_training", "Train the stem and modules on decoded programs.")
_stage_command("joint_training", "Train coder, stem and modules together.")


@cli.command(name="run-pipeline")
@click.option("--data-dir", type=click.Path(exists=True, file_okay=False))
@click.option(
    "--ckpt", type=click.Path(exists=True, dir_okay=False), help="Resume from"
)
@click.option("--out", "-o", type=click.Path(file_okay=False), default="runs")
@experiment_options
def run_pipeline_cmd(
    config: ExperimentConfig, data_dir: Optional[str], ckpt: Optional[str], out: str
) -> None:
    """Prior, question coding, module training, joint training, then test.

    Example:
        latentprog run-pipeline --config configs/mini.toml --out runs/seed0
    """
    data = _dataset(data_dir, config)
    bundle = _bundle(ckpt, config, data)
    _, report = run_pipeline(config, data, bundle=bundle, out_dir=out)
    click.echo(json.dumps(report.summary(), indent=2, sort_keys=True))


@cli.command()
@click.option("--data-dir", type=click.Path(exists=True, file_okay=False))
@click.option("--ckpt", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--split", type=click.Choice(["val", "test"]), default="test")
@click.option(
    "--traces", type=click.Path(dir_okay=False), help="Write per-item traces (JSONL)"
)
@experiment_options
def evaluate(
    config: ExperimentConfig,
    data_dir: Optional[str],
    ckpt: str,
    split: str,
    traces: Optional[str],
) -> None:
    """Program, reconstruction and VQA accuracy of a checkpoint."""
    data = _dataset(data_dir, config)
    bundle = _bundle(ckpt, config, data)
    metrics = compute_metrics(
        bundle,
        data,
        split,
        max_program_len=config.data.max_program_len,
        max_question_len=config.data.max_question_len,
    )
    click.echo(json.dumps({"split": split, **metrics.as_dict()}, sort_keys=True))
    if traces:
        _write_traces(bundle, data, split, config, Path(traces))
        click.echo(f"Traces written to {traces}")


def _write_traces(
    bundle: ModelBundle,
    data: DatasetSplit,
    split: str,
    config: ExperimentConfig,
    path: Path,
) -> None:
    items = data.split(split)
    programs = greedy_decode(
        bundle.inference,
        [i.question for i in items],
        max_len=config.data.max_program_len,
    )
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as handle, suspend_tape():
        for item, program in zip(items, programs):
            record: dict[str, Any] = {
                "id": item.item_id,
                "question": " ".join(item.question),
                "gold_program": list(item.program),
                "program": list(program),
                "answer": item.answer,
                "valid": is_valid_program(program, bundle.program_vocab),
            }
            if record["valid"]:
                _, trace = execute_program(
                    bundle.bank, bundle.stem, program, data.image(item)[None]
                )
                record["predicted"] = trace.answers()[0]
                record["answer_probs"] = np.exp(trace.log_probs[0]).round(6).tolist()
                record["attention"] = [
                    {"token": token, "map": grid[0].round(4).tolist()}
                    for token, grid in trace.attentions()
                ]
            handle.write(json.dumps(record, sort_keys=True) + "\n")


@cli.command()
@click.option("--data-dir", type=click.Path(exists=True, file_okay=False))
@click.option("--ckpt", type=click.Path(exists=True, dir_okay=False))
@click.option(
    "--item", "item_id", type=int, default=None, help="Item id (default: first test)"
)
@click.option("--target", type=click.Choice(list(ANSWERS)), default=ANSWERS[0])
@click.option("--oracle", is_flag=True, help="Use the hand-rigged oracle executor")
@click.option(
    "--out", "-o", type=click.Path(dir_okay=False), help="Records file (JSONL)"
)
@experiment_options
def probe(
    config: ExperimentConfig,
    data_dir: Optional[str],
    ckpt: Optional[str],
    item_id: Optional[int],
    target: str,
    oracle: bool,
    out: Optional[str],
) -> None:
    """Rejection-sample programs that make the executor answer TARGET.

    Example:
        latentprog probe --oracle --target yes --data-dir data/
    """
    if ckpt is None and not oracle:
        raise click.UsageError("probe needs --ckpt or --oracle")
    data = _dataset(data_dir, config)
    if oracle:
        if ckpt is not None:
            bundle = _bundle(ckpt, config, data)
        else:
            model = replace(config.model, channels=max(config.model.channels, 7))
            bundle = ModelBundle.initialize(
                _program_vocab(data), question_vocab(), model, config.seed
            )
            pretrain_prior_stage(bundle, data, config)
        rig_oracle_executor(bundle.stem, bundle.bank, bundle.program_vocab)
    else:
        bundle = _bundle(ckpt, config, data)

    items = {i.item_id: i for i in data.items}
    if item_id is None:
        item = data.test[0]
    elif item_id in items:
        item = items[item_id]
    else:
        raise ConfigurationError(f"No item with id {item_id}")
    result = posterior_probe(
        bundle,
        data.image(item),
        target,
        n_draws=config.probe.n_draws,
        top_k=config.probe.top_k,
        seed=config.seed,
        workers=config.workers,
        scene=data.scenes[item.scene_id],
        max_program_len=config.data.max_program_len,
        max_question_len=config.data.max_question_len,
    )
    records = result.to_records()
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        with Path(out).open("w", encoding="utf-8") as handle:
            for record in records:
                handle.write(json.dumps(record, sort_keys=True) + "\n")
    else:
        for record in records:
            click.echo(json.dumps(record, sort_keys=True))
    summary = result.summary()
    click.echo(
        f"item {item.item_id}: {summary['n_accepted']}/{summary['n_draws']} accepted "
        f"({summary['distinct_accepted']} distinct), coherence {summary['coherence']}"
    )
    for rank, entry in enumerate(result.entries, 1):
        click.echo(
            f"{rank:3d}. {' '.join(entry.program):50s} {entry.log_prior:8.3f}  "
            f"{' '.join(entry.question)}"
        )


@cli.command()
@click.option("--seed", type=int, default=0)
@click.option("--rtol", type=float, default=1e-4)
@click.pass_context
def gradcheck(ctx: click.Context, seed: int, rtol: float) -> None:
    """Finite-difference check of every primitive and model loss."""
    reports = gradient_suite(seed=seed, rtol=rtol)
    for name, report in reports.items():
        click.echo(f"{name:12s} {report}")
    failed = [name for name, report in reports.items() if not report.passed]
    if failed:
        click.echo(f"Error: gradient check failed for {', '.join(failed)}", err=True)
        ctx.exit(2)


@cli.command()
@experiment_options
def info(config: ExperimentConfig) -> None:
    """Print build information and the experiment fingerprint."""
    print_reproducibility_report(config)


def main(argv: Optional[list[str]] = None) -> int:
    """Entry point for the CLI."""
    return cli.main(args=argv, prog_name="latentprog", standalone_mode=False, obj={})


if __name__ == "__main__":
    sys.exit(main())
