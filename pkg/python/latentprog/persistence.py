"""Checkpoint, dataset and metrics-log file formats.

Checkpoint layout (all integers u32 little-endian, payloads float64 LE)::

    magic "LPCK" | format version | header length | header JSON (UTF-8)
    tensor count | per tensor: name length, name, rank, extents..., payload
    SHA256 of everything above (32 bytes)

The header carries the vocabularies, model dimensions, configuration snapshot,
seed, stage tag and completed stages. Serialization is canonical (sorted JSON
keys, tensors in name order), so save -> load -> save is byte-identical.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import struct
from collections.abc import Mapping
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np

from latentprog.config import ModelConfig
from latentprog.context import ModelBundle
from latentprog.exceptions import (
    CheckpointError,
    CheckpointIntegrityError,
    CheckpointMismatchError,
    ConfigurationError,
    DatasetError,
)
from latentprog.grammar import ProgramVocab, is_valid_program
from latentprog.shapes import DatasetSplit, QAItem, Scene
from latentprog.vocab import Vocabulary

logger = logging.getLogger(__name__)

MAGIC = b"LPCK"
FORMAT_VERSION = 1
_U32 = struct.Struct("<I")
_DIGEST = 32

PathLike = Union[str, Path]

__all__ = [
    "FORMAT_VERSION",
    "Checkpoint",
    "MetricsLog",
    "bundle_from_checkpoint",
    "checkpoint_from_bundle",
    "load_checkpoint",
    "load_dataset",
    "save_checkpoint",
    "save_dataset",
]


@dataclass
class Checkpoint:
    header: dict[str, Any]
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def stage(self) -> str:
        return str(self.header.get("stage", "init"))

    @property
    def completed(self) -> list[str]:
        return list(self.header.get("completed", []))


def checkpoint_from_bundle(
    bundle: ModelBundle, config: Optional[Mapping[str, Any]] = None
) -> Checkpoint:
    """Snapshot every parameter of ``bundle`` plus its stage tags and notes."""
    header = {
        "format_version": FORMAT_VERSION,
        "program_vocab": bundle.program_vocab.to_dict(),
        "program_vocab_hash": bundle.program_vocab.fingerprint(),
        "question_vocab": list(bundle.question_vocab.tokens),
        "question_vocab_hash": bundle.question_vocab.fingerprint(),
        "dims": {**bundle.prior.dims(), "channels": bundle.stem.channels},
        "prior_frozen": bundle.prior.frozen,
        "seed": bundle.seed,
        "stage": bundle.stage,
        "completed": list(bundle.completed),
        "notes": list(bundle.notes),
        "config": dict(config) if config is not None else {},
    }
    tensors = {name: t.data.copy() for name, t in bundle.parameters().items()}
    return Checkpoint(header, tensors)


def _encode(checkpoint: Checkpoint) -> bytes:
    text = json.dumps(checkpoint.header, sort_keys=True, separators=(",", ":"))
    header = text.encode()
    parts = [MAGIC, _U32.pack(FORMAT_VERSION), _U32.pack(len(header)), header]
    parts.append(_U32.pack(len(checkpoint.tensors)))
    for name in sorted(checkpoint.tensors):
        array = np.ascontiguousarray(checkpoint.tensors[name], dtype="<f8")
        encoded = name.encode("utf-8")
        parts += [_U32.pack(len(encoded)), encoded, _U32.pack(array.ndim)]
        parts += [_U32.pack(extent) for extent in array.shape]
        parts.append(array.tobytes())
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def save_checkpoint(
    path: PathLike,
    state: Union[Checkpoint, ModelBundle],
    config: Optional[Mapping[str, Any]] = None,
) -> Path:
    """Write ``state`` atomically (temp file + rename)."""
    if isinstance(state, Checkpoint):
        checkpoint = state
    else:
        checkpoint = checkpoint_from_bundle(state, config)
    path = Path(path)
    temp = path.with_name(path.name + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        temp.write_bytes(_encode(checkpoint))
        os.replace(temp, path)
    except OSError as exc:
        raise CheckpointError(f"Cannot write checkpoint {path}: {exc}") from exc
    logger.info("checkpoint saved to %s (stage %s)", path, checkpoint.stage)
    return path


class _Reader:
    def __init__(self, data: bytes, path: Path):
        self.data, self.offset, self.path = data, 0, path

    def take(self, size: int) -> bytes:
        end = self.offset + size
        if size < 0 or end > len(self.data):
            raise CheckpointIntegrityError(f"Truncated checkpoint {self.path}")
        chunk = self.data[self.offset : end]
        self.offset = end
        return chunk

    def u32(self) -> int:
        return int(_U32.unpack(self.take(4))[0])


def _decode(data: bytes, path: Path) -> Checkpoint:
    if len(data) < len(MAGIC) + _DIGEST or not data.startswith(MAGIC):
        raise CheckpointIntegrityError(f"{path} is not a checkpoint file")
    body, digest = data[:-_DIGEST], data[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointIntegrityError(
            f"Checksum mismatch in {path}; file truncated or modified"
        )
    reader = _Reader(body, path)
    reader.take(len(MAGIC))
    version = reader.u32()
    if version != FORMAT_VERSION:
        raise CheckpointMismatchError(
            f"Unsupported checkpoint format in {path}",
            [f"format version: expected {FORMAT_VERSION}, found {version}"],
        )
    try:
        header = json.loads(reader.take(reader.u32()).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointIntegrityError(f"Corrupt header in {path}: {exc}") from exc
    tensors: dict[str, np.ndarray] = {}
    for _ in range(reader.u32()):
        name = reader.take(reader.u32()).decode("utf-8")
        shape = tuple(reader.u32() for _ in range(reader.u32()))
        count = int(np.prod(shape)) if shape else 1
        payload = reader.take(8 * count)
        array = np.frombuffer(payload, dtype="<f8").reshape(shape)
        tensors[name] = array.astype(np.float64)
    if reader.offset != len(body):
        raise CheckpointIntegrityError(f"Trailing bytes in {path}")
    return Checkpoint(header, tensors)


def load_checkpoint(
    path: PathLike,
    *,
    program_vocab: Optional[ProgramVocab] = None,
    question_vocab: Optional[Vocabulary] = None,
) -> Checkpoint:
    """Read and verify a checkpoint; nothing is returned on any failure.

    Raises:
        CheckpointIntegrityError: Truncated, corrupted or tampered file.
        CheckpointMismatchError: Format version or vocabulary differs from the
            expected one (the message lists the differences).
    """
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"Cannot read checkpoint {path}: {exc}") from exc
    checkpoint = _decode(data, path)
    differences = []
    for label, vocab, key in (
        ("program vocab", program_vocab, "program_vocab_hash"),
        ("question vocab", question_vocab, "question_vocab_hash"),
    ):
        if vocab is not None and checkpoint.header.get(key) != vocab.fingerprint():
            differences.append(
                f"{label}: expected {vocab.fingerprint()[:12]}, "
                f"found {str(checkpoint.header.get(key))[:12]}"
            )
    if differences:
        raise CheckpointMismatchError(f"Checkpoint {path} does not match", differences)
    return checkpoint


def bundle_from_checkpoint(checkpoint: Checkpoint) -> ModelBundle:
    """Rebuild a :class:`ModelBundle` with the stored weights."""
    header = checkpoint.header
    dims = header["dims"]
    bundle = ModelBundle.initialize(
        ProgramVocab.from_dict(header["program_vocab"]),
        Vocabulary(header["question_vocab"]),
        ModelConfig(
            embed_dim=dims["embed_dim"],
            hidden_dim=dims["hidden_dim"],
            channels=dims["channels"],
        ),
        seed=int(header["seed"]),
    )
    params = bundle.parameters()
    missing = sorted(set(params) - set(checkpoint.tensors))
    extra = sorted(set(checkpoint.tensors) - set(params))
    if missing or extra:
        raise CheckpointMismatchError(
            "Checkpoint tensors do not match the model",
            [f"missing: {n}" for n in missing] + [f"unexpected: {n}" for n in extra],
        )
    for name, param in params.items():
        stored = checkpoint.tensors[name]
        if stored.shape != param.shape:
            raise CheckpointMismatchError(
                f"Shape mismatch for {name}",
                [f"{name}: {param.shape} vs {stored.shape}"],
            )
        param.data = stored.copy()
    if header.get("prior_frozen"):
        bundle.prior.freeze()
    bundle.stage = str(header.get("stage", "init"))
    bundle.completed = list(header.get("completed", []))
    bundle.notes = list(header.get("notes", []))
    return bundle


# ---------------------------------------------------------------------------
# Dataset files
# ---------------------------------------------------------------------------


def _write_lines(path: Path, records: list[dict[str, Any]]) -> None:
    with path.open("w", encoding="utf-8") as handle:
        for record in records:
            handle.write(json.dumps(record, sort_keys=True) + "\n")


def save_dataset(data: DatasetSplit, out_dir: PathLike) -> Path:
    """Write ``scenes.jsonl``, ``items.jsonl`` and ``meta.json`` under ``out_dir``.

    Scene cells are stored as ``[row, col, shape, color]``.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        _write_lines(
            out / "scenes.jsonl",
            [
                {
                    "id": scene_id,
                    "cells": [[y, x, s, c] for x, y, s, c in scene.objects()],
                }
                for scene_id, scene in sorted(data.scenes.items())
            ],
        )
        _write_lines(out / "items.jsonl", [item.to_record() for item in data.items])
        (out / "meta.json").write_text(
            json.dumps(data.meta, sort_keys=True, indent=2) + "\n", encoding="utf-8"
        )
    except OSError as exc:
        raise DatasetError(f"Cannot write dataset to {out}: {exc}") from exc
    logger.info("dataset written to %s (%d items)", out, len(data.items))
    return out


def _read_lines(path: Path) -> list[dict[str, Any]]:
    with path.open(encoding="utf-8") as handle:
        return [json.loads(line) for line in handle if line.strip()]


def load_dataset(data_dir: PathLike) -> DatasetSplit:
    """Load and cross-check a dataset directory.

    Raises:
        DatasetError: Missing/unreadable files, dangling scene ids, or gold
            programs that do not validate against the stored vocabulary.
    """
    root = Path(data_dir)
    try:
        scene_records = _read_lines(root / "scenes.jsonl")
        item_records = _read_lines(root / "items.jsonl")
        meta = json.loads((root / "meta.json").read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetError(f"Cannot read dataset in {root}: {exc}") from exc

    try:
        scenes = {
            int(r["id"]): Scene.from_objects(
                (x, y, s, c) for y, x, s, c in r["cells"]
            )
            for r in scene_records
        }
        items = [QAItem.from_record(r) for r in item_records]
        vocab = ProgramVocab.from_dict(meta["program_vocab"])
    except (KeyError, TypeError, ValueError, ConfigurationError) as exc:
        raise DatasetError(f"Malformed dataset record in {root}: {exc}") from exc
    for item in items:
        if item.scene_id not in scenes:
            raise DatasetError(
                f"Item {item.item_id} refers to unknown scene {item.scene_id}"
            )
        if not is_valid_program(item.program, vocab):
            raise DatasetError(f"Item {item.item_id} has an invalid gold program")
    return DatasetSplit(scenes, items, meta)


class MetricsLog:
    """Append-only line-delimited metric records; usable as a training sink."""

    def __init__(self, path: PathLike):
        self.path = Path(path)

    def append(self, stage: str, step: int, metric: str, value: float) -> None:
        record = {
            "stage": stage,
            "step": int(step),
            "metric": metric,
            "value": float(value),
        }
        try:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("a", encoding="utf-8") as handle:
                handle.write(json.dumps(record, sort_keys=True) + "\n")
        except OSError as exc:
            raise DatasetError(
                f"Cannot append to metrics log {self.path}: {exc}"
            ) from exc

    __call__ = append

    def read(self) -> list[dict[str, Any]]:
        if not self.path.exists():
            return []
        return _read_lines(self.path)
