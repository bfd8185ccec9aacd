"""Evaluation metrics and ablation/delta table rendering.

Span scoring follows the CoNLL convention: a predicted (type, start, end)
span counts only on an exact match. Empty-vs-empty scores 1.0 (vacuous
perfection) so spanless shards are not penalized with a divide-by-zero zero.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Iterable, Optional, Sequence

METRIC_ACCURACY = "accuracy"
METRIC_SPAN_F1 = "span_f1"


def accuracy(predictions: Sequence, gold: Sequence) -> float:
    """Fraction of exact matches."""
    if len(predictions) != len(gold):
        raise ValueError(f"length mismatch: {len(predictions)} predictions vs {len(gold)} gold")
    if len(gold) == 0:
        raise ValueError("cannot score an empty set")
    return sum(1 for p, g in zip(predictions, gold) if p == g) / len(gold)


def extract_spans(tags: Sequence[str], repair_stray_i: bool = True) -> set:
    """Maximal (type, start, end-exclusive) spans from a BIO sequence.

    A stray I- (no live span of that type) starts a new span under the
    relaxed repair; strict mode drops the position as if it were O.
    """
    spans = set()
    start: Optional[int] = None
    current: Optional[str] = None

    def close(pos):
        nonlocal start, current
        if start is not None:
            spans.add((current, start, pos))
        start, current = None, None

    for pos, tag in enumerate(tags):
        if tag == "O" or tag == "":
            close(pos)
        elif tag.startswith("B-"):
            close(pos)
            start, current = pos, tag[2:]
        elif tag.startswith("I-"):
            etype = tag[2:]
            if current == etype:
                continue
            close(pos)
            if repair_stray_i:
                start, current = pos, etype
        else:
            raise ValueError(f"malformed tag {tag!r} at position {pos}")
    close(len(tags))
    return spans


def conll_f1(
    pred_tags: Sequence[Sequence[str]],
    gold_tags: Sequence[Sequence[str]],
    repair_stray_i: bool = True,
) -> float:
    """Span-level F1 over parallel BIO sequences."""
    if len(pred_tags) != len(gold_tags):
        raise ValueError(f"length mismatch: {len(pred_tags)} vs {len(gold_tags)} sequences")
    pred_spans, gold_spans = set(), set()
    for i, (pred, gold) in enumerate(zip(pred_tags, gold_tags)):
        if len(pred) != len(gold):
            raise ValueError(f"sequence {i}: {len(pred)} predicted tags vs {len(gold)} gold")
        pred_spans |= {(i,) + s for s in extract_spans(pred, repair_stray_i)}
        gold_spans |= {(i,) + s for s in extract_spans(gold, repair_stray_i=True)}
    if not pred_spans and not gold_spans:
        return 1.0
    tp = len(pred_spans & gold_spans)
    precision = tp / len(pred_spans) if pred_spans else 0.0
    recall = tp / len(gold_spans) if gold_spans else 0.0
    if precision + recall == 0.0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


@dataclass
class MetricsRecord:
    """One scored run cell, serializable as a JSON line."""

    run_id: str
    stage: str
    metric: str
    value: float
    variant: str = ""
    regime: str = ""
    seed: int = 0
    timestamp: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.value <= 1.0:
            raise ValueError(f"metric value {self.value} outside [0, 1]")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "MetricsRecord":
        return cls(**json.loads(line))


def append_records(path, records: Iterable[MetricsRecord]) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")


def read_records(path) -> list[MetricsRecord]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [MetricsRecord.from_json(line) for line in lines if line.strip()]


# -- tables -----------------------------------------------------------------


def _row_label(record: MetricsRecord) -> str:
    return record.stage if not record.variant else f"{record.stage} ({record.variant})"


def _cell_values(records, rows, columns, row_of, col_of):
    cells: dict = {}
    for rec in records:
        key = (row_of(rec), col_of(rec))
        cells.setdefault(key, []).append(rec.value)
    means = {}
    for r in rows:
        for c in columns:
            vals = cells.get((r, c))
            if vals:
                means[(r, c)] = sum(vals) / len(vals)
    return means


def render_ablation_table(
    records: Sequence[MetricsRecord],
    rows: Sequence[str],
    columns: Sequence[str],
    row_of=_row_label,
    col_of=lambda r: r.regime,
    header: str = "Model",
) -> str:
    """Plain-text table: one row per label, percent values to one decimal.

    Multiple records in a cell (several seeds) are averaged; missing cells
    render as an em dash. Output is a pure function of the record set.
    """
    means = _cell_values(records, rows, columns, row_of, col_of)
    lines = [" | ".join([header] + list(columns))]
    for r in rows:
        cells = []
        for c in columns:
            v = means.get((r, c))
            cells.append("—" if v is None else f"{100 * v:.1f}")
        lines.append(" | ".join([r] + cells))
    return "\n".join(lines)


def render_delta_table(
    records: Sequence[MetricsRecord],
    baseline_row: str,
    rows: Sequence[str],
    columns: Sequence[str],
    row_of=_row_label,
    col_of=lambda r: r.regime,
    header: str = "Factor",
) -> str:
    """Signed percentage-point deltas against a baseline row (rendered as —)."""
    means = _cell_values(records, list(rows) + [baseline_row], columns, row_of, col_of)
    for c in columns:
        if (baseline_row, c) not in means:
            raise ValueError(f"baseline row {baseline_row!r} missing for column {c!r}")
    lines = [" | ".join([header] + list(columns))]
    for r in rows:
        cells = []
        for c in columns:
            if r == baseline_row:
                cells.append("—")
                continue
            v = means.get((r, c))
            if v is None:
                cells.append("—")
            else:
                delta = 100 * (v - means[(baseline_row, c)])
                cells.append(f"{delta:+.1f}%")
        lines.append(" | ".join([r] + cells))
    return "\n".join(lines)
