"""Tests for the staged training pipeline."""

from dataclasses import replace

import pytest

from latentprog.context import ModelBundle
from latentprog.exceptions import ConfigurationError, PipelineError
from latentprog.grammar import default_program_vocab
from latentprog.persistence import MetricsLog, bundle_from_checkpoint, load_checkpoint
from latentprog.pipeline import STAGE_REGISTRY, Pipeline, default_stages, run_pipeline
from latentprog.shapes import build_dataset, question_vocab


@pytest.fixture
def data(tiny_config):
    d = tiny_config.data
    return build_dataset(
        train_size=d.train_size,
        val_size=d.val_size,
        test_size=d.test_size,
        supervision_fraction=d.supervision_fraction,
        seed=tiny_config.seed,
    )


@pytest.fixture
def bundle(tiny_config):
    return ModelBundle.initialize(
        default_program_vocab(), question_vocab(), tiny_config.model, tiny_config.seed
    )


class TestPipelineConstruction:
    """Stage lists and their validation."""

    def test_registry(self):
        assert list(STAGE_REGISTRY) == [
            "pretrain_prior",
            "question_coding",
            "module_training",
            "joint_training",
        ]

    def test_empty(self, tiny_config):
        with pytest.raises(ConfigurationError, match="at least one stage"):
            Pipeline([], tiny_config)

    def test_unknown_stage(self, tiny_config):
        with pytest.raises(ConfigurationError, match="Unknown pipeline stage"):
            Pipeline(["pretraining"], tiny_config)

    def test_bad_type(self, tiny_config):
        with pytest.raises(ConfigurationError, match="string or callable"):
            Pipeline([42], tiny_config)

    def test_repr(self, tiny_config):
        pipeline = Pipeline(["pretrain_prior", "question_coding"], tiny_config)
        assert repr(pipeline) == "Pipeline(['pretrain_prior', 'question_coding'])"

    def test_default_stages(self, tiny_config):
        assert default_stages(tiny_config)[-1] == "joint_training"
        skipped = replace(tiny_config, skip_module_training=True)
        assert "module_training" not in default_stages(skipped)


class TestPrerequisites:
    """Stages refuse to run out of order unless cold starts are allowed."""

    def test_joint_without_prerequisites(self, tiny_config, bundle, data):
        expected = "requires question_coding, module_training"
        with pytest.raises(PipelineError, match=expected):
            Pipeline(["joint_training"], tiny_config)(bundle, data)

    def test_question_coding_needs_prior(self, tiny_config, bundle, data):
        with pytest.raises(PipelineError, match="allow-cold-start"):
            Pipeline(["question_coding"], tiny_config)(bundle, data)

    def test_cold_start_allowed(self, tiny_config, bundle, data):
        config = replace(tiny_config, allow_cold_start=True)
        report = Pipeline(["module_training"], config)(bundle, data)
        assert "module_training" in report.stages
        assert bundle.completed == ["module_training"]

    def test_skip_module_training_waives_it(self, tiny_config, bundle, data):
        config = replace(tiny_config, skip_module_training=True)
        Pipeline(["pretrain_prior", "question_coding", "joint_training"], config)(
            bundle, data
        )
        assert bundle.completed == [
            "pretrain_prior",
            "question_coding",
            "joint_training",
        ]
        assert any("re-initialized" in note for note in bundle.notes)

    def test_stage_failure_wrapped(self, tiny_config, bundle, data):
        def broken(bundle, data, config, sink=None):
            raise ValueError("boom")

        with pytest.raises(PipelineError, match="Pipeline stage 'broken' failed: boom"):
            Pipeline([broken], tiny_config)(bundle, data)


class TestRunPipeline:
    """End-to-end runs on the tiny experiment."""

    def test_all_stages_and_outputs(self, tiny_config, data, tmp_path):
        bundle, report = run_pipeline(tiny_config, data, out_dir=tmp_path)
        assert list(report.stages) == default_stages(tiny_config)
        assert bundle.completed == default_stages(tiny_config)
        assert bundle.prior.frozen
        for name in report.stages:
            assert (tmp_path / f"{name}.ckpt").exists()
        assert report.test_metrics is not None
        assert report.test_metrics.count == 2
        records = MetricsLog(tmp_path / "metrics.jsonl").read()
        assert {r["stage"] for r in records} == {
            "question_coding",
            "module_training",
            "joint_training",
        }
        assert report.summary()["test"] == report.test_metrics.as_dict()

    def test_bit_identical_reruns(self, tiny_config, data, tmp_path):
        run_pipeline(tiny_config, data, out_dir=tmp_path / "a")
        run_pipeline(tiny_config, data, out_dir=tmp_path / "b")
        first = (tmp_path / "a" / "joint_training.ckpt").read_bytes()
        assert first == (tmp_path / "b" / "joint_training.ckpt").read_bytes()

    def test_resume_matches_uninterrupted(self, tiny_config, data, bundle, tmp_path):
        run_pipeline(tiny_config, data, out_dir=tmp_path / "full")
        Pipeline(["pretrain_prior", "question_coding"], tiny_config, tmp_path / "part")(
            bundle, data
        )
        checkpoint = load_checkpoint(tmp_path / "part" / "question_coding.ckpt")
        resumed = bundle_from_checkpoint(checkpoint)
        _, report = run_pipeline(
            tiny_config, data, bundle=resumed, out_dir=tmp_path / "rest"
        )
        assert list(report.stages) == ["module_training", "joint_training"]
        full = (tmp_path / "full" / "joint_training.ckpt").read_bytes()
        assert full == (tmp_path / "rest" / "joint_training.ckpt").read_bytes()

    def test_completed_bundle_only_evaluates(self, tiny_config, data):
        bundle, _ = run_pipeline(tiny_config, data)
        _, report = run_pipeline(tiny_config, data, bundle=bundle)
        assert report.stages == {}
        assert report.test_metrics is not None
