"""Character-level vocabulary, input packing, and dynamic 15% masking.

Corpus files are UTF-8 with one example per line:
  classification: ``name<TAB>tag<TAB>poi<TAB>label`` (label optional)
  tagging:        ``text<TAB>space-separated-BIO-tags`` (tags optional)
Vocab files hold one token per line; the line number is the id.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

log = logging.getLogger(__name__)

PAD, UNK, CLS, SEP, MASK = 0, 1, 2, 3, 4
RESERVED_TOKENS = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"]
IGNORE_INDEX = -1  # label value for positions outside any loss


class Vocab:
    """Bijective character <-> id map with five fixed reserved ids."""

    def __init__(self, tokens: Sequence[str]):
        if list(tokens[: len(RESERVED_TOKENS)]) != RESERVED_TOKENS:
            tokens = RESERVED_TOKENS + [t for t in tokens if t not in RESERVED_TOKENS]
        self.id_to_token = list(tokens)
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ValueError("vocabulary contains duplicate tokens")

    def __len__(self) -> int:
        return len(self.id_to_token)

    @property
    def num_reserved(self) -> int:
        return len(RESERVED_TOKENS)

    def encode(self, text: str) -> list[int]:
        get = self.token_to_id.get
        return [get(ch, UNK) for ch in text]

    def decode(self, ids: Iterable[int]) -> str:
        return "".join(self.id_to_token[i] for i in ids)

    def save(self, path):
        Path(path).write_text("\n".join(self.id_to_token) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(lines)


def build_vocab(corpus: Iterable[str], min_count: int = 1) -> Vocab:
    """Count characters and keep those seen at least ``min_count`` times.

    Ids are assigned by frequency descending, ties by codepoint ascending,
    after the five reserved ids.
    """
    counts: Counter = Counter()
    n_lines = 0
    for line in corpus:
        n_lines += 1
        counts.update(line)
    if n_lines == 0:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    kept = [(tok, c) for tok, c in counts.items() if c >= min_count]
    kept.sort(key=lambda item: (-item[1], ord(item[0])))
    if not kept:
        log.warning("min_count=%d removed every character; vocab is reserved-only", min_count)
    return Vocab(RESERVED_TOKENS + [tok for tok, _ in kept])


@dataclass
class PackedExample:
    """One model input row, already padded to max_seq_len."""

    token_ids: list[int]
    attention_mask: list[int]
    segment_ids: list[int]
    label: Optional[int] = None
    tag_ids: Optional[list[int]] = None  # IGNORE_INDEX outside the text span
    provenance: str = "gold"

    def __post_init__(self):
        if not (len(self.token_ids) == len(self.attention_mask) == len(self.segment_ids)):
            raise ValueError("token_ids, attention_mask and segment_ids must share a length")


def _truncate_fields(fields: list[list[int]], budget: int) -> list[list[int]]:
    """Trim characters until the fields fit, taking from the longest field.

    Ties go to the later field (the leading fields carry the stronger signal).
    """
    total = sum(len(f) for f in fields)
    while total > budget:
        longest = max(range(len(fields)), key=lambda i: (len(fields[i]), i))
        fields[longest] = fields[longest][:-1]
        total -= 1
    return fields


def pack_classification_input(
    name: str,
    tag: str,
    poi: str,
    vocab: Vocab,
    max_len: int,
    label: Optional[int] = None,
    provenance: str = "gold",
) -> PackedExample:
    """Lay out ``[CLS] name [SEP] tag [SEP] poi [SEP]`` padded to max_len."""
    if max_len < 8:
        raise ValueError(f"max_len must be >= 8, got {max_len}")
    fields = [vocab.encode(name), vocab.encode(tag), vocab.encode(poi)]
    fields = _truncate_fields(fields, max_len - 4)
    ids = [CLS]
    for f in fields:
        ids.extend(f)
        ids.append(SEP)
    n_real = len(ids)
    ids.extend([PAD] * (max_len - n_real))
    mask = [1] * n_real + [0] * (max_len - n_real)
    return PackedExample(ids, mask, [0] * max_len, label=label, provenance=provenance)


def pack_ner_input(
    text: str,
    tags: Optional[Sequence[str]],
    vocab: Vocab,
    max_len: int,
    tag_vocab: Optional[Sequence[str]] = None,
    provenance: str = "gold",
) -> PackedExample:
    """Lay out ``[CLS] text [SEP]`` with tags aligned to the characters.

    ``tag_ids`` carries IGNORE_INDEX at [CLS]/[SEP]/[PAD] positions so those
    never enter a tagging loss. Over-length text loses its tail together with
    the tail's tags.
    """
    if tags is not None:
        if len(tags) != len(text):
            raise ValueError(f"got {len(tags)} tags for {len(text)} characters")
        if tag_vocab is None:
            raise ValueError("tag_vocab is required when tags are given")
    keep = min(len(text), max_len - 2)
    ids = [CLS] + vocab.encode(text[:keep]) + [SEP]
    n_real = len(ids)
    ids.extend([PAD] * (max_len - n_real))
    mask = [1] * n_real + [0] * (max_len - n_real)
    tag_ids = None
    if tags is not None:
        index = {t: i for i, t in enumerate(tag_vocab)}
        tag_ids = [IGNORE_INDEX] * max_len
        for pos, t in enumerate(tags[:keep]):
            if t not in index:
                raise ValueError(f"tag {t!r} not in tag vocabulary {list(tag_vocab)}")
            tag_ids[pos + 1] = index[t]
    return PackedExample(ids, mask, [0] * max_len, tag_ids=tag_ids, provenance=provenance)


@dataclass
class MaskedBatch:
    """Masked inputs plus the original ids to predict at masked positions."""

    input_ids: np.ndarray  # [B, S] after mask substitution
    mlm_labels: np.ndarray  # [B, S], original id at masked slots, IGNORE_INDEX elsewhere
    mask_positions: np.ndarray  # [n_masked, 2] (row, col) pairs

    def __post_init__(self):
        rows, cols = self.mask_positions[:, 0], self.mask_positions[:, 1]
        marked = np.zeros(self.mlm_labels.shape, dtype=bool)
        marked[rows, cols] = True
        if not np.array_equal(marked, self.mlm_labels != IGNORE_INDEX):
            raise ValueError("mlm_labels and mask_positions disagree")


def apply_mlm_mask(
    batch: Sequence[PackedExample] | np.ndarray,
    vocab: Vocab,
    rng: np.random.Generator,
    mask_rate: float = 0.15,
    mask_token_prob: float = 0.8,
    random_token_prob: float = 0.1,
) -> MaskedBatch:
    """Independently select maskable positions at ``mask_rate`` and corrupt them.

    Of the selected positions, ``mask_token_prob`` become [MASK],
    ``random_token_prob`` become a random non-reserved id, and the rest keep
    their original character. Reserved ids ([PAD]/[UNK]/[CLS]/[SEP]/[MASK])
    are never selected. Call once per epoch for dynamic re-masking.
    """
    if not 0.0 <= mask_rate < 1.0:
        raise ValueError(f"mask_rate must be in [0, 1), got {mask_rate}")
    if isinstance(batch, np.ndarray):
        ids = batch.copy()
    else:
        ids = np.array([ex.token_ids for ex in batch], dtype=np.int64)
    maskable = ids >= len(RESERVED_TOKENS)
    selected = maskable & (rng.random(ids.shape) < mask_rate)
    labels = np.where(selected, ids, IGNORE_INDEX)
    action = rng.random(ids.shape)
    use_mask_token = selected & (action < mask_token_prob)
    use_random = selected & (action >= mask_token_prob) & (action < mask_token_prob + random_token_prob)
    out = ids.copy()
    out[use_mask_token] = MASK
    n_random = int(use_random.sum())
    if n_random:
        out[use_random] = rng.integers(len(RESERVED_TOKENS), len(vocab), size=n_random)
    positions = np.argwhere(selected)
    return MaskedBatch(out, labels, positions)


# -- corpus file formats --------------------------------------------------


def write_classification_corpus(path, rows: Iterable[tuple]) -> None:
    """Rows of (name, tag, poi[, label]); label may be None for pool files."""
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            name, tag, poi = row[0], row[1], row[2]
            label = row[3] if len(row) > 3 else None
            cols = [name, tag, poi] + ([] if label is None else [str(label)])
            fh.write("\t".join(cols) + "\n")


def read_classification_corpus(path) -> list[tuple]:
    rows = []
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        cols = line.split("\t")
        if len(cols) == 3:
            rows.append((cols[0], cols[1], cols[2], None))
        elif len(cols) == 4:
            rows.append((cols[0], cols[1], cols[2], int(cols[3])))
        else:
            raise ValueError(f"{path}:{n}: expected 3 or 4 tab-separated columns, got {len(cols)}")
    return rows


def write_ner_corpus(path, rows: Iterable[tuple]) -> None:
    """Rows of (text[, tags]); tags is a list of BIO strings or None."""
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            text = row[0]
            tags = row[1] if len(row) > 1 else None
            if tags is None:
                fh.write(text + "\n")
            else:
                fh.write(text + "\t" + " ".join(tags) + "\n")


def read_ner_corpus(path) -> list[tuple]:
    rows = []
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        cols = line.split("\t")
        if len(cols) == 1:
            rows.append((cols[0], None))
        elif len(cols) == 2:
            tags = cols[1].split(" ")
            if len(tags) != len(cols[0]):
                raise ValueError(f"{path}:{n}: {len(tags)} tags for {len(cols[0])} characters")
            rows.append((cols[0], tags))
        else:
            raise ValueError(f"{path}:{n}: expected 1 or 2 tab-separated columns")
    return rows
