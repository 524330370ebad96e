"""Tests for checkpoint, dataset and metrics-log files."""

import json

import numpy as np
import pytest

from latentprog.config import ModelConfig
from latentprog.context import ModelBundle
from latentprog.exceptions import (
    CheckpointError,
    CheckpointIntegrityError,
    CheckpointMismatchError,
    DatasetError,
)
from latentprog.grammar import ProgramVocab, default_program_vocab
from latentprog.persistence import (
    MetricsLog,
    bundle_from_checkpoint,
    checkpoint_from_bundle,
    load_checkpoint,
    load_dataset,
    save_checkpoint,
    save_dataset,
)
from latentprog.shapes import build_dataset, question_vocab

SMALL = ModelConfig(embed_dim=3, hidden_dim=4, channels=4)


@pytest.fixture
def bundle():
    models = ModelBundle.initialize(
        default_program_vocab(), question_vocab(), SMALL, seed=7
    )
    models.prior.freeze()
    models.mark_completed("pretrain_prior")
    models.mark_completed("question_coding")
    models.add_note("question_coding: stopped early after 2 epochs")
    return models


@pytest.fixture
def saved(bundle, tmp_path):
    return save_checkpoint(tmp_path / "qc.ckpt", bundle, {"seed": 7})


class TestCheckpointRoundTrip:
    """Save, load and rebuild."""

    def test_restores_weights_and_tags(self, bundle, saved):
        restored = bundle_from_checkpoint(load_checkpoint(saved))
        for name, param in bundle.parameters().items():
            np.testing.assert_array_equal(restored.parameters()[name].data, param.data)
        assert restored.stage == "question_coding"
        assert restored.completed == ["pretrain_prior", "question_coding"]
        assert restored.prior.frozen
        assert not restored.inference.frozen
        assert restored.seed == 7
        assert restored.notes == ["question_coding: stopped early after 2 epochs"]

    def test_resave_is_byte_identical(self, saved, tmp_path):
        again = save_checkpoint(tmp_path / "again.ckpt", load_checkpoint(saved))
        assert again.read_bytes() == saved.read_bytes()

    def test_header_contents(self, saved):
        header = load_checkpoint(saved).header
        assert header["config"] == {"seed": 7}
        assert header["dims"] == {"embed_dim": 3, "hidden_dim": 4, "channels": 4}

    def test_no_temp_file_left(self, saved):
        assert not saved.with_name(saved.name + ".tmp").exists()

    def test_matching_vocabularies_accepted(self, saved):
        load_checkpoint(
            saved,
            program_vocab=default_program_vocab(),
            question_vocab=question_vocab(),
        )


class TestCheckpointFailures:
    """Integrity and compatibility checks."""

    def test_flipped_byte(self, saved):
        data = bytearray(saved.read_bytes())
        data[len(data) // 2] ^= 0xFF
        saved.write_bytes(bytes(data))
        with pytest.raises(CheckpointIntegrityError, match="Checksum"):
            load_checkpoint(saved)

    def test_truncated(self, saved):
        saved.write_bytes(saved.read_bytes()[:-10])
        with pytest.raises(CheckpointIntegrityError):
            load_checkpoint(saved)

    def test_not_a_checkpoint(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"hello")
        with pytest.raises(CheckpointIntegrityError):
            load_checkpoint(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "absent.ckpt")

    def test_vocabulary_mismatch(self, saved):
        other = ProgramVocab([("find[red]", "find"), ("answer", "answer")])
        with pytest.raises(CheckpointMismatchError) as excinfo:
            load_checkpoint(saved, program_vocab=other)
        assert any("program vocab" in d for d in excinfo.value.differences)

    def test_missing_tensor(self, bundle, tmp_path):
        checkpoint = checkpoint_from_bundle(bundle)
        del checkpoint.tensors["bank.answer.bias"]
        path = save_checkpoint(tmp_path / "partial.ckpt", checkpoint)
        with pytest.raises(CheckpointMismatchError) as excinfo:
            bundle_from_checkpoint(load_checkpoint(path))
        assert "missing: bank.answer.bias" in excinfo.value.differences

    def test_shape_mismatch(self, bundle, tmp_path):
        checkpoint = checkpoint_from_bundle(bundle)
        checkpoint.tensors["bank.answer.bias"] = np.zeros(5)
        path = save_checkpoint(tmp_path / "bad.ckpt", checkpoint)
        with pytest.raises(CheckpointMismatchError, match="Shape mismatch"):
            bundle_from_checkpoint(load_checkpoint(path))


class TestDatasetFiles:
    """Dataset directory round trip and validation."""

    @pytest.fixture(scope="class")
    def data(self):
        return build_dataset(train_size=6, val_size=2, test_size=2, seed=5)

    def test_round_trip(self, data, tmp_path):
        loaded = load_dataset(save_dataset(data, tmp_path / "ds"))
        assert loaded.items == data.items
        assert loaded.scenes == data.scenes
        assert loaded.meta == data.meta

    def test_scene_cells_stored_row_first(self, data, tmp_path):
        root = save_dataset(data, tmp_path / "ds")
        record = json.loads((root / "scenes.jsonl").read_text().splitlines()[0])
        scene = data.scenes[record["id"]]
        assert record["cells"] == [[y, x, s, c] for x, y, s, c in scene.objects()]

    def test_missing_directory(self, tmp_path):
        with pytest.raises(DatasetError, match="Cannot read"):
            load_dataset(tmp_path / "nowhere")

    def test_dangling_scene(self, data, tmp_path):
        root = save_dataset(data, tmp_path / "ds")
        lines = (root / "items.jsonl").read_text().splitlines()
        record = json.loads(lines[0])
        record["scene_id"] = 999
        lines[0] = json.dumps(record)
        (root / "items.jsonl").write_text("\n".join(lines) + "\n")
        with pytest.raises(DatasetError, match="unknown scene"):
            load_dataset(root)

    def test_invalid_gold_program(self, data, tmp_path):
        root = save_dataset(data, tmp_path / "ds")
        lines = (root / "items.jsonl").read_text().splitlines()
        record = json.loads(lines[0])
        record["program"] = ["find[red]"]
        lines[0] = json.dumps(record)
        (root / "items.jsonl").write_text("\n".join(lines) + "\n")
        with pytest.raises(DatasetError, match="invalid gold program"):
            load_dataset(root)


class TestMetricsLog:
    """Line-delimited metric records."""

    def test_append_and_read(self, tmp_path):
        log = MetricsLog(tmp_path / "run" / "metrics.jsonl")
        log("question_coding", 3, "program_accuracy", 0.25)
        log.append("joint_training", 9, "vqa_accuracy", 0.5)
        assert log.read() == [
            {
                "stage": "question_coding",
                "step": 3,
                "metric": "program_accuracy",
                "value": 0.25,
            },
            {
                "stage": "joint_training",
                "step": 9,
                "metric": "vqa_accuracy",
                "value": 0.5,
            },
        ]

    def test_read_missing(self, tmp_path):
        assert MetricsLog(tmp_path / "none.jsonl").read() == []
