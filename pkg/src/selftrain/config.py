"""Experiment configuration: JSON loading, defaults, validation, hashing.

A config file only needs the keys it wants to override; everything else
falls back to the documented defaults below. The config hash is a sha256 of
the canonicalized (sorted-keys) JSON of the fully resolved config, so two
files that differ only in key order or defaulted values hash identically.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .data import TASK_CLASSIFICATION, TASK_NER, TASKS
from .objectives import InputVariant, LossVariant

# Stage schedules hold either a step budget or an epoch count (epochs win
# when both are set to null/None the loader falls back to these defaults).
DEFAULTS = {
    "task": TASK_CLASSIFICATION,
    "seed": 0,
    "deterministic": True,
    "threads": 1,
    "encoder": {
        "num_layers": 2,
        "hidden": 48,
        "heads": 4,
        "ffn_mult": 4,
        "max_seq_len": 28,
        "dropout": 0.1,
        "tie_mlm_weights": False,
        "use_tanh_pooler": False,
        "init_std": 0.02,
    },
    "data": {
        "num_classes": 8,
        "alphabet_size": 60,
        "noise_rate": 0.1,
        "motif_len": 3,
        "labeled_size": 500,
        "test_size": 1000,
        "pool_size": 5000,
        "entity_types": ["P", "T"],
        "min_count": 1,
    },
    "masking": {"rate": 0.15, "mask_token_prob": 0.8, "random_token_prob": 0.1},
    "pretrain": {"steps": 300, "epochs": None, "batch_size": 64, "lr": 1e-3, "warmup_frac": 0.1},
    "finetune": {"steps": None, "epochs": None, "batch_size": 32, "lr": 5e-4, "warmup_frac": 0.1},
    "tsp": {"steps": None, "epochs": 1, "batch_size": 64, "lr": 1e-3, "warmup_frac": 0.1},
    "loss_variant": "logits_kl_only",
    "input_variant": "nomask",
    "confidence_threshold": 0.9,
    "per_class_cap": None,
    "kl_temperature": 1.0,
    "ner_confidence": "mean",  # or "min" over per-token max probabilities
    "ablation_rows": [],
}

FINETUNE_EPOCH_DEFAULTS = {TASK_CLASSIFICATION: 7, TASK_NER: 3}


class ConfigError(ValueError):
    """A config parsed but violates a cross-field rule."""


@dataclass
class PipelineConfig:
    """Fully resolved experiment description (see DEFAULTS for the schema)."""

    raw: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.raw[key]

    @property
    def task(self) -> str:
        return self.raw["task"]

    @property
    def seed(self) -> int:
        return self.raw["seed"]

    @property
    def loss_variant(self) -> LossVariant:
        return LossVariant.parse(self.raw["loss_variant"])

    @property
    def input_variant(self) -> InputVariant:
        return InputVariant.parse(self.raw["input_variant"])

    def to_dict(self) -> dict:
        return copy.deepcopy(self.raw)

    def with_overrides(self, **kv) -> "PipelineConfig":
        """A new validated config with top-level keys replaced."""
        d = self.to_dict()
        for key, value in kv.items():
            if isinstance(value, dict) and isinstance(d.get(key), dict):
                d[key].update(value)
            else:
                d[key] = value
        return resolve_config(d)

    def hash(self) -> str:
        return canonical_hash(self.raw)

    def subset_hash(self, keys) -> str:
        return canonical_hash({k: self.raw[k] for k in sorted(keys)})


def _merge_defaults(defaults: dict, overrides: dict, path="") -> dict:
    out = copy.deepcopy(defaults)
    for key, value in overrides.items():
        if key not in defaults:
            raise ConfigError(f"unknown config key {path + key!r}")
        if isinstance(defaults[key], dict) and isinstance(value, dict):
            out[key] = _merge_defaults(defaults[key], value, path=f"{path}{key}.")
        else:
            out[key] = copy.deepcopy(value)
    return out


def canonical_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def resolve_config(overrides: dict) -> PipelineConfig:
    """Apply defaults and cross-field validation; raises ConfigError on rule hits."""
    cfg = _merge_defaults(DEFAULTS, overrides)

    if cfg["task"] not in TASKS:
        raise ConfigError(f"task must be one of {TASKS}, got {cfg['task']!r}")
    if cfg["finetune"]["epochs"] is None and cfg["finetune"]["steps"] is None:
        cfg["finetune"]["epochs"] = FINETUNE_EPOCH_DEFAULTS[cfg["task"]]

    enc = cfg["encoder"]
    if enc["hidden"] % enc["heads"] != 0:
        raise ConfigError(
            f"encoder.hidden ({enc['hidden']}) must be divisible by encoder.heads ({enc['heads']})"
        )
    if enc["num_layers"] < 1:
        raise ConfigError("encoder.num_layers must be >= 1")

    variant = LossVariant.parse(cfg["loss_variant"])
    input_variant = InputVariant.parse(cfg["input_variant"])
    if input_variant is InputVariant.NOMASK and variant.includes_mlm:
        raise ConfigError(
            "input_variant 'nomask' cannot be paired with a masked-LM loss variant: "
            "without masked positions the masked-LM term is undefined"
        )

    tau = cfg["confidence_threshold"]
    if not 0.0 < tau <= 1.0:
        raise ConfigError(f"confidence_threshold must be in (0, 1], got {tau}")

    if not 0.0 <= cfg["masking"]["rate"] < 1.0:
        raise ConfigError("masking.rate must be in [0, 1)")
    if cfg["masking"]["mask_token_prob"] + cfg["masking"]["random_token_prob"] > 1.0 + 1e-9:
        raise ConfigError("mask_token_prob + random_token_prob must not exceed 1")

    if cfg["ner_confidence"] not in ("mean", "min"):
        raise ConfigError("ner_confidence must be 'mean' or 'min'")

    for section in ("pretrain", "finetune", "tsp"):
        sched = cfg[section]
        if sched["batch_size"] < 1:
            raise ConfigError(f"{section}.batch_size must be >= 1")
        if sched["steps"] is not None and sched["steps"] < 0:
            raise ConfigError(f"{section}.steps must be >= 0")
        if sched["epochs"] is not None and sched["epochs"] < 0:
            raise ConfigError(f"{section}.epochs must be >= 0")

    if cfg["data"]["labeled_size"] < 1:
        raise ConfigError("data.labeled_size must be >= 1")

    return PipelineConfig(cfg)


def load_config(path) -> PipelineConfig:
    """Read a JSON config file; parse errors keep their line information."""
    text = Path(path).read_text(encoding="utf-8")
    try:
        overrides = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    if not isinstance(overrides, dict):
        raise ConfigError(f"{path}: top-level JSON value must be an object")
    return resolve_config(overrides)


def stage_seed(base_seed: int, stream: str) -> int:
    """Stable per-stage seed derivation (process-independent)."""
    digest = hashlib.sha256(f"{base_seed}/{stream}".encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")
