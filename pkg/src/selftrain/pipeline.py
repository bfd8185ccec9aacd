"""The five-stage training pipeline and the classic self-training baseline.

Stages (artifact tags in parentheses):
  1. pre-train on unlabeled text with the masked-character objective (A)
  2. fine-tune on the labeled set with the task loss (B)
  3. label the whole unlabeled pool with the fine-tuned model (pseudo)
  4. pre-train a freshly initialized model on the pseudo labels under the
     configured loss/input variant (C) — fresh init on purpose: stage 4 must
     start from the same weights as stage 1 so the two pre-training routes
     stay comparable
  5. fine-tune stage 4's model on the labeled set only (D); pseudo-labeled
     examples are rejected here by contract

Classic self-training: fine-tune a teacher on the labeled set, keep its most
confident pool predictions (class-balanced), and fine-tune a student on the
union. Every stage is cached in the artifact store by a content hash, so
ablation grids re-use shared ancestors instead of recomputing them.
"""

from __future__ import annotations

import itertools
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from . import textpipe as tp
from .artifacts import (
    ArtifactStore,
    PseudoLabelRecord,
    StageArtifact,
    read_pseudo_records,
    stage_key,
    write_pseudo_records,
)
from .config import PipelineConfig, stage_seed
from .data import (
    ClsExample,
    GOLD,
    LabeledSet,
    NerExample,
    TASK_CLASSIFICATION,
    TASK_NER,
    UnlabeledPool,
    tag_vocabulary,
)
from .encoder import EncoderConfig, EncoderModel
from .metrics import METRIC_ACCURACY, METRIC_SPAN_F1, MetricsRecord, accuracy, conll_f1
from .objectives import (
    InputVariant,
    LossVariant,
    classification_ce_loss,
    combined_loss,
    crf_nll,
    crf_viterbi,
    kl_logits_loss,
    mlm_loss,
    token_kl_loss,
)
from .optim import Adam
from .synth import GeneratorSpec, generate_corpus

log = logging.getLogger(__name__)

EVAL_BATCH = 256

STAGE_A = "A"
STAGE_B = "B"
STAGE_PSEUDO = "pseudo"
STAGE_C = "C"
STAGE_D = "D"
STAGE_BASELINE = "baseline"
STAGE_CLASSIC_ST = "classic-ST"


# -- task data --------------------------------------------------------------


def generator_spec_from_config(config: PipelineConfig) -> GeneratorSpec:
    d = config["data"]
    return GeneratorSpec(
        seed=config.seed,
        num_classes=d["num_classes"],
        alphabet_size=d["alphabet_size"],
        noise_rate=d["noise_rate"],
        motif_len=d["motif_len"],
        entity_types=tuple(d["entity_types"]),
        labeled_train=d["labeled_size"],
        test=d["test_size"],
        unlabeled_pool=d["pool_size"],
    )


@dataclass
class TaskData:
    """Generated corpora plus the vocabulary derived from the unlabeled pool."""

    config: PipelineConfig
    labeled: LabeledSet
    test: LabeledSet
    pool: UnlabeledPool
    vocab: tp.Vocab
    tag_vocab: list

    @classmethod
    def build(cls, config: PipelineConfig) -> "TaskData":
        spec = generator_spec_from_config(config)
        labeled, test, pool = generate_corpus(spec, config.task)
        vocab = tp.build_vocab(
            (example_text(ex) for ex in pool.examples), min_count=config["data"]["min_count"]
        )
        tag_vocab = tag_vocabulary(config["data"]["entity_types"])
        return cls(config, labeled, test, pool, vocab, tag_vocab)

    @property
    def num_classes(self) -> int:
        return self.config["data"]["num_classes"]

    def encoder_config(self) -> EncoderConfig:
        enc = dict(self.config["encoder"])
        enc["vocab_size"] = len(self.vocab)
        enc["num_classes"] = self.num_classes
        enc["num_tags"] = len(self.tag_vocab)
        return EncoderConfig(**enc)


def example_text(ex) -> str:
    if isinstance(ex, ClsExample):
        return ex.name + ex.tag + ex.poi
    return ex.text


# -- packing ----------------------------------------------------------------


@dataclass
class PackedDataset:
    """Column-oriented padded arrays for a list of examples."""

    task: str
    ids: np.ndarray  # [N, S] token ids
    attn: np.ndarray  # [N, S] 0/1
    labels: Optional[np.ndarray]  # [N] class ids, -1 when absent
    tags: Optional[np.ndarray]  # [N, S] tag ids, -1 outside the text span
    provenance: np.ndarray  # [N] strings: gold | pseudo
    uids: np.ndarray

    def __len__(self):
        return self.ids.shape[0]

    def text_lengths(self) -> np.ndarray:
        return self.attn.sum(axis=1) - 2  # drop [CLS] and [SEP]


def pack_examples(task: str, examples: Sequence, vocab: tp.Vocab, tag_vocab, max_len: int) -> PackedDataset:
    ids, attn, labels, tags, prov, uids = [], [], [], [], [], []
    for ex in examples:
        if task == TASK_CLASSIFICATION:
            packed = tp.pack_classification_input(
                ex.name, ex.tag, ex.poi, vocab, max_len, label=ex.label, provenance=ex.provenance
            )
            labels.append(-1 if ex.label is None else ex.label)
        else:
            packed = tp.pack_ner_input(
                ex.text,
                list(ex.tags) if ex.tags is not None else None,
                vocab,
                max_len,
                tag_vocab=tag_vocab,
                provenance=ex.provenance,
            )
            tags.append(
                packed.tag_ids if packed.tag_ids is not None else [tp.IGNORE_INDEX] * max_len
            )
        ids.append(packed.token_ids)
        attn.append(packed.attention_mask)
        prov.append(ex.provenance)
        uids.append(ex.uid)
    return PackedDataset(
        task=task,
        ids=np.asarray(ids, dtype=np.int64),
        attn=np.asarray(attn, dtype=np.int64),
        labels=np.asarray(labels, dtype=np.int64) if task == TASK_CLASSIFICATION else None,
        tags=np.asarray(tags, dtype=np.int64) if task == TASK_NER else None,
        provenance=np.asarray(prov),
        uids=np.asarray(uids, dtype=np.int64),
    )


def crf_inputs(model: EncoderModel, hidden, dataset: PackedDataset, idx: np.ndarray):
    """Emissions over text positions (offset 1) plus the prefix mask."""
    emissions = model.token_logits(hidden)[:, 1:, :]
    seq = dataset.ids.shape[1] - 1
    lengths = dataset.text_lengths()[idx]
    mask = (np.arange(seq)[None, :] < lengths[:, None]).astype(np.int64)
    return emissions, mask


# -- generic training loop ----------------------------------------------------


@dataclass
class TrainLog:
    losses: list = field(default_factory=list)
    provenance_seen: set = field(default_factory=set)

    def summary(self) -> dict:
        return {
            "steps": len(self.losses),
            "loss_first": self.losses[0] if self.losses else None,
            "loss_last": self.losses[-1] if self.losses else None,
            "losses": self.losses,
            "provenance_seen": sorted(self.provenance_seen),
        }


def _resolve_total_steps(schedule: dict, n_examples: int) -> int:
    per_epoch = max(1, math.ceil(n_examples / schedule["batch_size"]))
    if schedule.get("steps") is not None:
        return int(schedule["steps"])
    return per_epoch * int(schedule["epochs"])


def run_training(
    model: EncoderModel,
    dataset: PackedDataset,
    schedule: dict,
    seed: int,
    batch_loss: Callable,
    epoch_hook: Optional[Callable] = None,
) -> TrainLog:
    """Shuffle/batch/step loop shared by every training stage.

    ``batch_loss(idx, epoch_state, rng)`` builds the loss tensor for the rows
    ``idx``; ``epoch_hook(rng)`` runs at each epoch start (dynamic masking).
    """
    rng = np.random.default_rng(seed)
    n = len(dataset)
    total = _resolve_total_steps(schedule, n)
    tlog = TrainLog()
    if total == 0:
        return tlog
    opt = Adam(
        model.adam_slots(),
        lr=schedule["lr"],
        warmup_steps=max(1, int(round(schedule["warmup_frac"] * total))),
        total_steps=total,
    )
    batch = schedule["batch_size"]
    step = 0
    while step < total:
        order = rng.permutation(n)
        epoch_state = epoch_hook(rng) if epoch_hook is not None else None
        for start in range(0, n, batch):
            idx = order[start : start + batch]
            tlog.provenance_seen.update(np.unique(dataset.provenance[idx]).tolist())
            loss = batch_loss(idx, epoch_state, rng)
            T.backward(loss)
            opt.step()
            tlog.losses.append(float(loss.item()))
            step += 1
            if step >= total:
                break
    return tlog


# -- evaluation ----------------------------------------------------------------


def predict_classification(model: EncoderModel, dataset: PackedDataset) -> np.ndarray:
    preds = []
    with T.no_grad():
        for start in range(0, len(dataset), EVAL_BATCH):
            sl = slice(start, start + EVAL_BATCH)
            hidden = model.forward(dataset.ids[sl], dataset.attn[sl], training=False)
            preds.append(model.cls_logits(hidden).numpy().argmax(axis=-1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=int)


def predict_tags(model: EncoderModel, dataset: PackedDataset, tag_vocab) -> list:
    out = []
    crf = model.crf_params()
    with T.no_grad():
        for start in range(0, len(dataset), EVAL_BATCH):
            sl = slice(start, start + EVAL_BATCH)
            idx = np.arange(start, min(start + EVAL_BATCH, len(dataset)))
            hidden = model.forward(dataset.ids[sl], dataset.attn[sl], training=False)
            emissions, mask = crf_inputs(model, hidden, dataset, idx)
            for path in crf_viterbi(emissions, mask, crf):
                out.append([tag_vocab[t] for t in path])
    return out


def gold_tag_strings(dataset: PackedDataset, tag_vocab) -> list:
    out = []
    for row, length in zip(dataset.tags, dataset.text_lengths()):
        out.append([tag_vocab[t] for t in row[1 : 1 + length]])
    return out


def evaluate_model(model: EncoderModel, data: TaskData, test_packed: PackedDataset) -> tuple:
    if data.config.task == TASK_CLASSIFICATION:
        preds = predict_classification(model, test_packed)
        return METRIC_ACCURACY, accuracy(preds.tolist(), test_packed.labels.tolist())
    preds = predict_tags(model, test_packed, data.tag_vocab)
    gold = gold_tag_strings(test_packed, data.tag_vocab)
    return METRIC_SPAN_F1, conll_f1(preds, gold)


# -- loss builders ---------------------------------------------------------------


def _mlm_epoch_hook(dataset: PackedDataset, vocab: tp.Vocab, masking: dict):
    def hook(rng):
        return tp.apply_mlm_mask(
            dataset.ids,
            vocab,
            rng,
            mask_rate=masking["rate"],
            mask_token_prob=masking["mask_token_prob"],
            random_token_prob=masking["random_token_prob"],
        )

    return hook


def _finetune_batch_loss(model, dataset: PackedDataset, task: str):
    def batch_loss(idx, _epoch_state, rng):
        hidden = model.forward(dataset.ids[idx], dataset.attn[idx], training=True, rng=rng)
        if task == TASK_CLASSIFICATION:
            return classification_ce_loss(model.cls_logits(hidden), dataset.labels[idx])
        emissions, mask = crf_inputs(model, hidden, dataset, idx)
        tags = dataset.tags[idx][:, 1:]
        return crf_nll(emissions, tags, mask, model.crf_params())

    return batch_loss


# -- stages ----------------------------------------------------------------------


def _timestamp(config: PipelineConfig) -> float:
    return 0.0 if config["deterministic"] else time.time()


def _metric_record(config, stage, metric, value, variant="") -> MetricsRecord:
    return MetricsRecord(
        run_id=f"{config.hash()[:12]}/{stage}",
        stage=stage,
        metric=metric,
        value=value,
        variant=variant,
        regime=f"labeled={config['data']['labeled_size']}",
        seed=config.seed,
        timestamp=_timestamp(config),
    )


def _shared_key_config(config: PipelineConfig, sections, drop_labeled=False) -> dict:
    sub = {k: config.to_dict()[k] for k in sections}
    if drop_labeled and "data" in sub:
        sub["data"] = {k: v for k, v in sub["data"].items() if k != "labeled_size"}
    return sub


def init_seed(config: PipelineConfig) -> int:
    return stage_seed(config.seed, "model-init")


def fresh_model(config: PipelineConfig, data: TaskData) -> EncoderModel:
    return EncoderModel.init(data.encoder_config(), seed=init_seed(config))


def step1_domain_pretrain(config: PipelineConfig, data: TaskData, store: ArtifactStore) -> StageArtifact:
    """Masked-character pre-training over the unlabeled pool (stage A)."""
    if len(data.pool) == 0:
        raise ValueError("the unlabeled pool is empty; nothing to pre-train on")
    key = stage_key(
        STAGE_A,
        _shared_key_config(config, ("task", "seed", "encoder", "data", "masking", "pretrain"), drop_labeled=True),
        parent_key=None,
    )
    if store.exists(key):
        return store.load(key)
    model = fresh_model(config, data)
    packed = pack_examples(config.task, data.pool.examples, data.vocab, data.tag_vocab, config["encoder"]["max_seq_len"])

    def batch_loss(idx, masked: tp.MaskedBatch, rng):
        hidden = model.forward(masked.input_ids[idx], packed.attn[idx], training=True, rng=rng)
        return mlm_loss(model.mlm_logits(hidden), masked.mlm_labels[idx])

    tlog = run_training(
        model,
        packed,
        config["pretrain"],
        seed=stage_seed(config.seed, "pretrain"),
        batch_loss=batch_loss,
        epoch_hook=_mlm_epoch_hook(packed, data.vocab, config["masking"]),
    )
    return store.commit(
        STAGE_A, key, None, model, config.to_dict(), [], {"train": tlog.summary()}
    )


def _finetune(
    config: PipelineConfig,
    data: TaskData,
    stage: str,
    base: Optional[StageArtifact],
    labeled: LabeledSet,
    store: ArtifactStore,
    test_packed: Optional[PackedDataset],
    variant_label: str = "",
    extra_key_fields: Optional[dict] = None,
) -> StageArtifact:
    """Shared fine-tuning runner for stages B, D, the baseline, and classic ST."""
    if labeled.task != config.task:
        raise ValueError(f"labeled set task {labeled.task!r} does not match config task {config.task!r}")
    key_cfg = _shared_key_config(config, ("task", "seed", "encoder", "data", "finetune"))
    key_cfg["labeled_uids"] = sorted(int(ex.uid) for ex in labeled.examples)
    if extra_key_fields:
        key_cfg.update(extra_key_fields)
    key = stage_key(stage, key_cfg, base.key if base else None)
    if store.exists(key):
        return store.load(key)
    if base is not None:
        model = EncoderModel.load(base.checkpoint_path, data.encoder_config())
    else:
        model = fresh_model(config, data)
    packed = pack_examples(
        config.task, labeled.examples, data.vocab, data.tag_vocab, config["encoder"]["max_seq_len"]
    )
    tlog = run_training(
        model,
        packed,
        config["finetune"],
        seed=stage_seed(config.seed, "finetune"),
        batch_loss=_finetune_batch_loss(model, packed, config.task),
    )
    metrics = []
    if test_packed is not None:
        metric, value = evaluate_model(model, data, test_packed)
        metrics.append(_metric_record(config, stage, metric, value, variant=variant_label))
    return store.commit(
        stage, key, base.key if base else None, model, config.to_dict(), metrics, {"train": tlog.summary()}
    )


def step2_finetune(config, data, base: StageArtifact, store, test_packed=None) -> StageArtifact:
    """Fine-tune the domain-pretrained model on gold labels (stage B)."""
    return _finetune(config, data, STAGE_B, base, data.labeled, store, test_packed)


def classification_confidence(probs: np.ndarray) -> np.ndarray:
    return probs.max(axis=-1)


def step3_pseudo_label(
    config: PipelineConfig, data: TaskData, teacher: StageArtifact, store: ArtifactStore
) -> tuple:
    """Label the whole pool with the fine-tuned teacher (eval mode, no dropout)."""
    if teacher.stage in (STAGE_A, STAGE_C, STAGE_PSEUDO):
        raise ValueError(f"pseudo-labeling needs a fine-tuned teacher, got stage {teacher.stage!r}")
    key = stage_key(
        STAGE_PSEUDO,
        _shared_key_config(config, ("task", "seed", "encoder", "data", "ner_confidence"), drop_labeled=True),
        parent_key=teacher.key,
    )
    if store.exists(key):
        artifact = store.load(key)
        return artifact, read_pseudo_records(artifact.records_path)
    model = teacher.load_model(data.encoder_config())
    packed = pack_examples(
        config.task, data.pool.examples, data.vocab, data.tag_vocab, config["encoder"]["max_seq_len"]
    )
    records = []
    with T.no_grad():
        for start in range(0, len(packed), EVAL_BATCH):
            sl = slice(start, min(start + EVAL_BATCH, len(packed)))
            idx = np.arange(sl.start, sl.stop)
            hidden = model.forward(packed.ids[sl], packed.attn[sl], training=False)
            if config.task == TASK_CLASSIFICATION:
                logits = model.cls_logits(hidden).numpy()
                shifted = logits - logits.max(axis=-1, keepdims=True)
                probs = np.exp(shifted)
                probs /= probs.sum(axis=-1, keepdims=True)
                conf = classification_confidence(probs)
                labels = logits.argmax(axis=-1)
                for row, ex_i in enumerate(idx):
                    records.append(
                        PseudoLabelRecord(
                            data.pool.examples[ex_i],
                            int(labels[row]),
                            logits[row].astype(np.float32),
                            float(conf[row]),
                        )
                    )
            else:
                emissions, mask = crf_inputs(model, hidden, packed, idx)
                paths = crf_viterbi(emissions, mask, model.crf_params())
                em = emissions.numpy()
                lengths = packed.text_lengths()[idx]
                for row, ex_i in enumerate(idx):
                    n = int(lengths[row])
                    row_logits = em[row, :n].astype(np.float32)
                    shifted = row_logits - row_logits.max(axis=-1, keepdims=True)
                    probs = np.exp(shifted)
                    probs /= probs.sum(axis=-1, keepdims=True)
                    per_token_max = probs.max(axis=-1)
                    conf = (
                        float(per_token_max.mean())
                        if config["ner_confidence"] == "mean"
                        else float(per_token_max.min())
                    )
                    tags = tuple(data.tag_vocab[t] for t in paths[row])
                    source = data.pool.examples[ex_i]
                    # keep only the prefix the teacher actually saw (packing
                    # truncates over-length text), so tags align with the text
                    seen = NerExample(source.uid, source.text[:n], None, provenance=source.provenance)
                    records.append(PseudoLabelRecord(seen, tags, row_logits, conf))
    artifact = store.commit(
        STAGE_PSEUDO, key, teacher.key, None, config.to_dict(), [], {"n_records": len(records)}
    )
    write_pseudo_records(artifact.records_path, records)
    return artifact, records


def _teacher_class_logits(records) -> np.ndarray:
    return np.stack([np.asarray(r.logits, dtype=np.float32) for r in records])


def _teacher_token_logits(records, max_len: int, num_tags: int) -> np.ndarray:
    out = np.zeros((len(records), max_len - 1, num_tags), dtype=np.float32)
    for i, rec in enumerate(records):
        arr = np.asarray(rec.logits, dtype=np.float32)
        out[i, : arr.shape[0]] = arr
    return out


def step4_task_specific_pretrain(
    config: PipelineConfig,
    data: TaskData,
    records: Sequence[PseudoLabelRecord],
    pseudo_artifact: StageArtifact,
    store: ArtifactStore,
    loss_variant: Optional[LossVariant] = None,
    input_variant: Optional[InputVariant] = None,
) -> StageArtifact:
    """Pre-train a fresh model on pseudo labels under the variant grid (stage C)."""
    if not records:
        raise ValueError("no pseudo-label records to pre-train on")
    variant = LossVariant.parse(loss_variant or config.loss_variant)
    input_variant = InputVariant.parse(input_variant or config.input_variant)
    if input_variant is InputVariant.NOMASK and variant.includes_mlm:
        raise ValueError(
            "illegal variant pairing: unmasked input leaves the masked-LM term undefined"
        )
    key_cfg = _shared_key_config(
        config, ("task", "seed", "encoder", "data", "masking", "tsp", "kl_temperature"), drop_labeled=True
    )
    key_cfg["loss_variant"] = variant.value
    key_cfg["input_variant"] = input_variant.value
    key = stage_key(STAGE_C, key_cfg, parent_key=pseudo_artifact.key)
    if store.exists(key):
        return store.load(key)

    # same init as stage 1: both pre-training routes start from identical weights
    model = fresh_model(config, data)
    max_len = config["encoder"]["max_seq_len"]
    examples = [rec.training_example() for rec in records]
    packed = pack_examples(config.task, examples, data.vocab, data.tag_vocab, max_len)
    if config.task == TASK_CLASSIFICATION:
        teacher_cls = _teacher_class_logits(records)
        teacher_tok = None
    else:
        teacher_cls = None
        teacher_tok = _teacher_token_logits(records, max_len, len(data.tag_vocab))
    temperature = config["kl_temperature"]

    mask_hook = (
        _mlm_epoch_hook(packed, data.vocab, config["masking"])
        if input_variant is InputVariant.MASKED
        else None
    )
    mask_tokens_seen = 0

    def batch_loss(idx, masked: Optional[tp.MaskedBatch], rng):
        nonlocal mask_tokens_seen
        if input_variant is InputVariant.MASKED:
            ids = masked.input_ids[idx]
        else:
            ids = packed.ids[idx]
        mask_tokens_seen += int((ids == tp.MASK).sum())
        hidden = model.forward(ids, packed.attn[idx], training=True, rng=rng)
        if config.task == TASK_CLASSIFICATION:
            student = model.cls_logits(hidden)
            if variant.uses_logits:
                task = kl_logits_loss(teacher_cls[idx], student, temperature=temperature)
            else:
                task = classification_ce_loss(student, packed.labels[idx])
        else:
            emissions, mask = crf_inputs(model, hidden, packed, idx)
            if variant.uses_logits:
                task = token_kl_loss(teacher_tok[idx], emissions, mask)
            else:
                task = crf_nll(emissions, packed.tags[idx][:, 1:], mask, model.crf_params())
        if variant.includes_mlm:
            return combined_loss(variant, task, mlm_loss(model.mlm_logits(hidden), masked.mlm_labels[idx]))
        return combined_loss(variant, task)

    tlog = run_training(
        model,
        packed,
        config["tsp"],
        seed=stage_seed(config.seed, "tsp"),
        batch_loss=batch_loss,
        epoch_hook=mask_hook,
    )
    return store.commit(
        STAGE_C,
        key,
        pseudo_artifact.key,
        model,
        config.to_dict(),
        [],
        {
            "train": tlog.summary(),
            "loss_variant": variant.value,
            "input_variant": input_variant.value,
            "mask_tokens_seen": mask_tokens_seen,
        },
    )


def step5_final_finetune(
    config: PipelineConfig,
    data: TaskData,
    base: StageArtifact,
    labeled: LabeledSet,
    store: ArtifactStore,
    test_packed=None,
    variant_label: str = "",
) -> StageArtifact:
    """Final fine-tune on manually labeled data only (stage D)."""
    if base.stage != STAGE_C:
        raise ValueError(f"stage D must start from a stage-C artifact, got {base.stage!r}")
    tainted = [ex.uid for ex in labeled.examples if ex.provenance != GOLD]
    if tainted:
        raise ValueError(
            f"stage D accepts manually labeled data only; got pseudo-labeled uids {tainted[:5]}"
        )
    return _finetune(config, data, STAGE_D, base, labeled, store, test_packed, variant_label=variant_label)


# -- classic self-training -----------------------------------------------------


def default_per_class_cap(config: PipelineConfig) -> int:
    return math.ceil(2 * config["data"]["labeled_size"] / config["data"]["num_classes"])


def select_confident(
    records: Sequence[PseudoLabelRecord],
    threshold: float,
    per_class_cap: int,
    seed: int,
    task: str = TASK_CLASSIFICATION,
) -> list:
    """Confidence-filter then class-balance: uniform sample up to the cap per class.

    Tagging records have no class structure; they sample as a single group.
    """
    if not 0.0 < threshold <= 1.0:
        raise ValueError(f"confidence threshold must be in (0, 1], got {threshold}")
    rng = np.random.default_rng(seed)
    qualifying = [r for r in records if r.confidence >= threshold]
    groups: dict = {}
    for rec in qualifying:
        cls = int(rec.label) if task == TASK_CLASSIFICATION else 0
        groups.setdefault(cls, []).append(rec)
    selected = []
    for cls in sorted(groups):
        group = groups[cls]
        if len(group) > per_class_cap:
            pick = rng.choice(len(group), size=per_class_cap, replace=False)
            group = [group[i] for i in sorted(pick)]
        selected.extend(group)
    return selected


def classic_self_training(
    config: PipelineConfig,
    data: TaskData,
    base: Optional[StageArtifact],
    store: ArtifactStore,
    test_packed=None,
    records: Optional[Sequence[PseudoLabelRecord]] = None,
    threshold: Optional[float] = None,
    per_class_cap: Optional[int] = None,
    iterations: int = 1,
    label: str = STAGE_CLASSIC_ST,
) -> StageArtifact:
    """Teacher on gold labels -> confident pseudo subset -> student on the union.

    ``records`` short-circuits the teacher's own labeling pass (used by the
    ablation that re-uses the stage-3 records); otherwise each iteration
    labels the pool with the current model.
    """
    threshold = config["confidence_threshold"] if threshold is None else threshold
    cap = per_class_cap if per_class_cap is not None else (
        config["per_class_cap"] or default_per_class_cap(config)
    )
    student = _finetune(
        config, data, label, base, data.labeled, store, test_packed,
        extra_key_fields={"st": "teacher"},
    )
    for it in range(iterations):
        if records is None:
            _, iter_records = step3_pseudo_label(config, data, student, store)
        else:
            iter_records = records
        subset = select_confident(
            iter_records, threshold, cap, stage_seed(config.seed, f"st-sample-{it}"), task=config.task
        )
        if not subset:
            log.warning(
                "classic self-training: no record reaches confidence %.3f; "
                "student trains on the labeled set alone",
                threshold,
            )
            mixed = data.labeled
        else:
            mixed = LabeledSet(
                config.task, list(data.labeled.examples) + [r.training_example() for r in subset]
            )
        student = _finetune(
            config, data, label, base, mixed, store, test_packed,
            extra_key_fields={"st": f"student-{it}", "threshold": threshold, "cap": cap},
        )
        student.extras["selected_per_class"] = _class_histogram(subset, config.task)
    return student


def _class_histogram(records, task) -> dict:
    hist: dict = {}
    for rec in records:
        cls = int(rec.label) if task == TASK_CLASSIFICATION else 0
        hist[cls] = hist.get(cls, 0) + 1
    return {str(k): v for k, v in sorted(hist.items())}


# -- full pipeline and grid ------------------------------------------------------


@dataclass
class PipelineResult:
    artifacts: dict
    metrics: list
    pseudo_records: list = field(default_factory=list)


def run_full_pipeline(
    config: PipelineConfig, store: ArtifactStore, ablation_rows: Optional[Sequence[str]] = None
) -> PipelineResult:
    """Execute stages 1..5 and optionally the comparison rows.

    ``ablation_rows`` may include "baseline" (plain fine-tune from scratch),
    "classic-ST-base", "classic-ST-A", and "classic-ST-C".
    """
    rows = list(ablation_rows if ablation_rows is not None else config["ablation_rows"])
    data = TaskData.build(config)
    test_packed = pack_examples(
        config.task, data.test.examples, data.vocab, data.tag_vocab, config["encoder"]["max_seq_len"]
    )
    variant_label = f"{config.loss_variant.value}/{config.input_variant.value}"

    artifacts: dict = {}
    metrics: list = []

    artifacts[STAGE_A] = step1_domain_pretrain(config, data, store)
    artifacts[STAGE_B] = step2_finetune(config, data, artifacts[STAGE_A], store, test_packed)
    pseudo_artifact, records = step3_pseudo_label(config, data, artifacts[STAGE_B], store)
    artifacts[STAGE_PSEUDO] = pseudo_artifact
    artifacts[STAGE_C] = step4_task_specific_pretrain(
        config, data, records, pseudo_artifact, store
    )
    artifacts[STAGE_D] = step5_final_finetune(
        config, data, artifacts[STAGE_C], data.labeled, store, test_packed, variant_label=variant_label
    )

    # stage C is never a headline row, but score it for diagnostics
    c_model = artifacts[STAGE_C].load_model(data.encoder_config())
    metric, value = evaluate_model(c_model, data, test_packed)
    metrics.append(_metric_record(config, STAGE_C, metric, value, variant=variant_label))

    for row in rows:
        if row == STAGE_BASELINE:
            artifacts[row] = _finetune(config, data, STAGE_BASELINE, None, data.labeled, store, test_packed)
        elif row == "classic-ST-base":
            artifacts[row] = classic_self_training(
                config, data, None, store, test_packed, label="classic-ST-base"
            )
        elif row == "classic-ST-A":
            artifacts[row] = classic_self_training(
                config, data, artifacts[STAGE_A], store, test_packed, label="classic-ST-A"
            )
        elif row == "classic-ST-C":
            # re-uses the stage-3 records rather than refreshing them
            artifacts[row] = classic_self_training(
                config, data, artifacts[STAGE_C], store, test_packed,
                records=records, label="classic-ST-C",
            )
        else:
            raise ValueError(f"unknown ablation row {row!r}")

    for artifact in artifacts.values():
        metrics.extend(artifact.metrics)
    return PipelineResult(artifacts, metrics, records)


GRID_AXES = ("loss_variant", "input_variant", "labeled_size", "stage")


@dataclass
class GridResult:
    records: list
    skips: list  # (cell, reason)
    cells_run: list


def run_ablation_grid(config: PipelineConfig, axes: dict, store: ArtifactStore) -> GridResult:
    """Cartesian product over the requested axes, sharing cached ancestors.

    Cells pairing unmasked input with a masked-LM loss are skipped with a
    recorded reason instead of failing the grid.
    """
    for name in axes:
        if name not in GRID_AXES:
            raise ValueError(f"unknown grid axis {name!r}; supported: {GRID_AXES}")
    loss_values = [LossVariant.parse(v) for v in axes.get("loss_variant", [config.loss_variant])]
    input_values = [InputVariant.parse(v) for v in axes.get("input_variant", [config.input_variant])]
    size_values = axes.get("labeled_size", [config["data"]["labeled_size"]])
    stage_values = axes.get("stage", [STAGE_D])

    records: list = []
    skips: list = []
    cells_run: list = []
    for loss_v, input_v, size in itertools.product(loss_values, input_values, size_values):
        cell = {"loss_variant": loss_v.value, "input_variant": input_v.value, "labeled_size": size}
        if input_v is InputVariant.NOMASK and loss_v.includes_mlm:
            skips.append((cell, "nomask input leaves the masked-LM term undefined"))
            continue
        cell_config = config.with_overrides(
            loss_variant=loss_v.value,
            input_variant=input_v.value,
            data={"labeled_size": int(size)},
        )
        rows = [STAGE_BASELINE] if STAGE_BASELINE in stage_values else []
        result = run_full_pipeline(cell_config, store, ablation_rows=rows)
        cells_run.append(cell)
        for stage in stage_values:
            art = result.artifacts.get(stage)
            if art is None:
                continue
            records.extend(art.metrics)
    return GridResult(records, skips, cells_run)
