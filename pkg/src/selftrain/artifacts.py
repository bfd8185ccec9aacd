"""Write-once artifact store keyed by content hashes, plus pseudo-label files.

Each artifact directory holds a checkpoint, a config snapshot, metrics, and
an extras blob; a COMPLETE marker written last makes interrupted runs safe to
resume. Pseudo-label files are JSONL: one object per unlabeled example with
the teacher's label, pre-softmax logits, and confidence.
"""

from __future__ import annotations

import json
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .config import canonical_hash
from .data import ClsExample, NerExample, PSEUDO
from .encoder import EncoderConfig, EncoderModel
from .metrics import MetricsRecord


@dataclass
class PseudoLabelRecord:
    """An unlabeled example plus its teacher output."""

    example: object  # ClsExample or NerExample, label-free
    label: object  # class id (int) or BIO tag tuple
    logits: np.ndarray  # [C] for classification, [L, K] per text position for tagging
    confidence: float

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")

    def to_json(self) -> str:
        ex = self.example
        if isinstance(ex, ClsExample):
            payload = {"id": ex.uid, "name": ex.name, "tag": ex.tag, "poi": ex.poi}
            label = int(self.label)
        else:
            payload = {"id": ex.uid, "text": ex.text}
            label = list(self.label)
        payload["label"] = label
        payload["logits"] = np.asarray(self.logits).tolist()
        payload["confidence"] = float(self.confidence)
        return json.dumps(payload, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "PseudoLabelRecord":
        d = json.loads(line)
        if "name" in d:
            example = ClsExample(d["id"], d["name"], d["tag"], d["poi"], None, provenance=PSEUDO)
            label = int(d["label"])
        else:
            example = NerExample(d["id"], d["text"], None, provenance=PSEUDO)
            label = tuple(d["label"])
        return cls(example, label, np.asarray(d["logits"], dtype=np.float32), d["confidence"])

    def training_example(self):
        """The example with the pseudo label attached, provenance 'pseudo'."""
        ex = self.example
        if isinstance(ex, ClsExample):
            return ClsExample(ex.uid, ex.name, ex.tag, ex.poi, int(self.label), provenance=PSEUDO)
        return NerExample(ex.uid, ex.text, tuple(self.label), provenance=PSEUDO)


def write_pseudo_records(path, records) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")


def read_pseudo_records(path) -> list[PseudoLabelRecord]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [PseudoLabelRecord.from_json(line) for line in lines if line.strip()]


@dataclass
class StageArtifact:
    """One completed pipeline stage: checkpoint + provenance + metrics."""

    stage: str
    key: str
    parent_key: Optional[str]
    path: Path
    config_snapshot: dict = field(default_factory=dict)
    metrics: list = field(default_factory=list)
    extras: dict = field(default_factory=dict)

    @property
    def checkpoint_path(self) -> Path:
        return self.path / "checkpoint.bin"

    @property
    def records_path(self) -> Path:
        return self.path / "records.jsonl"

    def load_model(self, encoder_config: EncoderConfig) -> EncoderModel:
        return EncoderModel.load(self.checkpoint_path, encoder_config)

    def checkpoint_bytes(self) -> bytes:
        return self.checkpoint_path.read_bytes()


def stage_key(stage: str, relevant_config: dict, parent_key: Optional[str]) -> str:
    return canonical_hash({"stage": stage, "config": relevant_config, "parent": parent_key})


class ArtifactStore:
    """Directory-per-artifact store; artifacts are immutable once COMPLETE."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def dir_for(self, key: str) -> Path:
        return self.root / key

    def exists(self, key: str) -> bool:
        return (self.dir_for(key) / "COMPLETE").exists()

    def begin(self, key: str) -> Path:
        """A clean working directory for the artifact (drops partial leftovers)."""
        d = self.dir_for(key)
        if d.exists() and not self.exists(key):
            shutil.rmtree(d)
        d.mkdir(parents=True, exist_ok=True)
        return d

    def commit(
        self,
        stage: str,
        key: str,
        parent_key: Optional[str],
        model: Optional[EncoderModel],
        config_snapshot: dict,
        metrics: list,
        extras: dict,
    ) -> StageArtifact:
        d = self.begin(key)
        if model is not None:
            model.save(d / "checkpoint.bin")
        (d / "config.json").write_text(
            json.dumps(
                {"stage": stage, "parent": parent_key, "config": config_snapshot},
                indent=2,
                sort_keys=True,
            ),
            encoding="utf-8",
        )
        with open(d / "metrics.jsonl", "w", encoding="utf-8") as fh:
            for rec in metrics:
                fh.write(rec.to_json() + "\n")
        (d / "extras.json").write_text(json.dumps(extras, sort_keys=True), encoding="utf-8")
        (d / "COMPLETE").write_text("", encoding="utf-8")
        return StageArtifact(stage, key, parent_key, d, config_snapshot, list(metrics), dict(extras))

    def load(self, key: str) -> StageArtifact:
        d = self.dir_for(key)
        if not self.exists(key):
            raise FileNotFoundError(f"artifact {key} not in store {self.root}")
        meta = json.loads((d / "config.json").read_text(encoding="utf-8"))
        metrics = [
            MetricsRecord.from_json(line)
            for line in (d / "metrics.jsonl").read_text(encoding="utf-8").splitlines()
            if line.strip()
        ]
        extras = json.loads((d / "extras.json").read_text(encoding="utf-8"))
        return StageArtifact(meta["stage"], key, meta["parent"], d, meta["config"], metrics, extras)
