"""Deterministic synthetic corpora for the classification and tagging tasks.

Classification examples carry a class-specific character motif in the name
field (and, with lower probability, weaker motifs in the tag and poi fields);
the label is flipped to a uniformly random class at ``noise_rate``, so a
motif-lookup rule tops out at (1 - noise) + noise / num_classes accuracy.

Tagging examples are random character strings with 0..3 property spans pasted
in from fixed per-type template strings; BIO tags mark the spans exactly.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, asdict

import numpy as np

from .data import ClsExample, LabeledSet, NerExample, UnlabeledPool, tag_vocabulary

DEFAULT_ALPHABET = "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ01234567"

# Fixed uid namespaces keep the test set and pool identical across runs that
# only differ in labeled_train, so cached artifacts stay shareable.
TEST_UID_BASE = 1_000_000
POOL_UID_BASE = 2_000_000


@dataclass
class GeneratorSpec:
    seed: int = 0
    num_classes: int = 8
    alphabet_size: int = 60
    noise_rate: float = 0.1
    motif_len: int = 3
    name_len: tuple = (5, 10)
    tag_len: tuple = (2, 5)
    poi_len: tuple = (3, 7)
    tag_motif_prob: float = 0.5
    poi_motif_prob: float = 0.3
    # tagging task
    entity_types: tuple = ("P", "T")
    templates_per_type: int = 4
    span_len: tuple = (2, 4)
    text_len: tuple = (15, 40)
    span_count_probs: tuple = (0.3, 0.35, 0.25, 0.1)
    # sizes
    labeled_train: int = 500
    test: int = 1000
    unlabeled_pool: int = 5000

    def __post_init__(self):
        if self.alphabet_size < 2 or self.alphabet_size > len(DEFAULT_ALPHABET):
            raise ValueError(f"alphabet_size must be in [2, {len(DEFAULT_ALPHABET)}]")
        if not 0.0 <= self.noise_rate <= 1.0:
            raise ValueError("noise_rate must be in [0, 1]")
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        if min(self.labeled_train, self.test, self.unlabeled_pool) < 1:
            raise ValueError("all corpus sizes must be >= 1")
        if max(self.labeled_train, self.test, self.unlabeled_pool) >= TEST_UID_BASE:
            raise ValueError(f"corpus sizes must stay below {TEST_UID_BASE}")
        if abs(sum(self.span_count_probs) - 1.0) > 1e-9:
            raise ValueError("span_count_probs must sum to 1")

    @property
    def alphabet(self) -> str:
        return DEFAULT_ALPHABET[: self.alphabet_size]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorSpec":
        d = dict(d)
        for key in ("name_len", "tag_len", "poi_len", "span_len", "text_len",
                    "span_count_probs", "entity_types"):
            if key in d and isinstance(d[key], list):
                d[key] = tuple(d[key])
        return cls(**d)


def _stable_stream_id(stream: str) -> int:
    # process-independent, unlike builtin hash()
    return int.from_bytes(hashlib.sha256(stream.encode()).digest()[:4], "little")


def _rng_for(seed: int, stream: str, index: int = 0) -> np.random.Generator:
    """Independent per-example PCG64 stream derived from (seed, stream, index)."""
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(_stable_stream_id(stream), index))
    return np.random.Generator(np.random.PCG64(ss))


def _distinct_motifs(rng: np.random.Generator, alphabet: str, count: int, length: int) -> list[str]:
    motifs: list[str] = []
    seen = set()
    while len(motifs) < count:
        m = "".join(rng.choice(list(alphabet), size=length))
        if m not in seen:
            seen.add(m)
            motifs.append(m)
    return motifs


def class_motifs(spec: GeneratorSpec) -> dict:
    """The class-signature motifs for each field, fixed by the spec seed."""
    rng = _rng_for(spec.seed, "motifs")
    return {
        "name": _distinct_motifs(rng, spec.alphabet, spec.num_classes, spec.motif_len),
        "tag": _distinct_motifs(rng, spec.alphabet, spec.num_classes, 2),
        "poi": _distinct_motifs(rng, spec.alphabet, spec.num_classes, 2),
    }


def _random_chars(rng, alphabet, low, high) -> list[str]:
    n = int(rng.integers(low, high + 1))
    return list(rng.choice(list(alphabet), size=n))


def _insert(rng, chars: list[str], motif: str) -> str:
    pos = int(rng.integers(0, len(chars) + 1))
    return "".join(chars[:pos]) + motif + "".join(chars[pos:])


def _make_cls_example(spec: GeneratorSpec, motifs: dict, uid: int, with_label: bool) -> ClsExample:
    rng = _rng_for(spec.seed, "cls", uid)
    cls = int(rng.integers(0, spec.num_classes))
    name = _insert(rng, _random_chars(rng, spec.alphabet, *spec.name_len), motifs["name"][cls])
    tag_chars = _random_chars(rng, spec.alphabet, *spec.tag_len)
    tag = _insert(rng, tag_chars, motifs["tag"][cls]) if rng.random() < spec.tag_motif_prob else "".join(tag_chars)
    poi_chars = _random_chars(rng, spec.alphabet, *spec.poi_len)
    poi = _insert(rng, poi_chars, motifs["poi"][cls]) if rng.random() < spec.poi_motif_prob else "".join(poi_chars)
    label = cls
    if rng.random() < spec.noise_rate:
        label = int(rng.integers(0, spec.num_classes))
    return ClsExample(uid, name, tag, poi, label if with_label else None)


def generate_classification_corpus(spec: GeneratorSpec):
    """Labeled train set, labeled test set, and an unlabeled pool (disjoint uids)."""
    motifs = class_motifs(spec)
    train = [_make_cls_example(spec, motifs, uid, True) for uid in range(spec.labeled_train)]
    test = [
        _make_cls_example(spec, motifs, TEST_UID_BASE + i, True) for i in range(spec.test)
    ]
    pool = [
        _make_cls_example(spec, motifs, POOL_UID_BASE + i, False)
        for i in range(spec.unlabeled_pool)
    ]
    return (
        LabeledSet("classification", train),
        LabeledSet("classification", test),
        UnlabeledPool("classification", pool),
    )


def span_templates(spec: GeneratorSpec) -> dict:
    """Fixed property strings per entity type, drawn once from the spec seed."""
    rng = _rng_for(spec.seed, "templates")
    out = {}
    for etype in spec.entity_types:
        out[etype] = [
            "".join(rng.choice(list(spec.alphabet), size=int(rng.integers(spec.span_len[0], spec.span_len[1] + 1))))
            for _ in range(spec.templates_per_type)
        ]
    return out


def _make_ner_example(spec: GeneratorSpec, templates: dict, uid: int, with_tags: bool) -> NerExample:
    rng = _rng_for(spec.seed, "ner", uid)
    chars = _random_chars(rng, spec.alphabet, *spec.text_len)
    tags = ["O"] * len(chars)
    n_spans = int(rng.choice(len(spec.span_count_probs), p=spec.span_count_probs))
    for _ in range(n_spans):
        etype = spec.entity_types[int(rng.integers(0, len(spec.entity_types)))]
        template = templates[etype][int(rng.integers(0, len(templates[etype])))]
        # inserting inside an existing span would strand its I- tail
        safe = [p for p in range(len(chars) + 1) if p == len(chars) or not tags[p].startswith("I-")]
        pos = safe[int(rng.integers(0, len(safe)))]
        chars = chars[:pos] + list(template) + chars[pos:]
        span_tags = [f"B-{etype}"] + [f"I-{etype}"] * (len(template) - 1)
        tags = tags[:pos] + span_tags + tags[pos:]
    return NerExample(uid, "".join(chars), tuple(tags) if with_tags else None)


def generate_ner_corpus(spec: GeneratorSpec):
    """Tagging analogue of the classification generator."""
    templates = span_templates(spec)
    train = [_make_ner_example(spec, templates, uid, True) for uid in range(spec.labeled_train)]
    test = [_make_ner_example(spec, templates, TEST_UID_BASE + i, True) for i in range(spec.test)]
    pool = [
        _make_ner_example(spec, templates, POOL_UID_BASE + i, False)
        for i in range(spec.unlabeled_pool)
    ]
    return LabeledSet("ner", train), LabeledSet("ner", test), UnlabeledPool("ner", pool)


def generate_corpus(spec: GeneratorSpec, task: str):
    if task == "classification":
        return generate_classification_corpus(spec)
    if task == "ner":
        return generate_ner_corpus(spec)
    raise ValueError(f"unknown task {task!r}")


def ner_tag_vocab(spec: GeneratorSpec) -> list[str]:
    return tag_vocabulary(spec.entity_types)


def split_labeled_unlabeled(corpus: LabeledSet, labeled_size: int, seed: int):
    """Seed-deterministic disjoint split; the pool side loses its labels."""
    if labeled_size > len(corpus):
        raise ValueError(f"labeled_size {labeled_size} exceeds corpus size {len(corpus)}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(corpus))
    keep = set(order[:labeled_size].tolist())
    labeled, pool = [], []
    for i, ex in enumerate(corpus.examples):
        if i in keep:
            labeled.append(ex)
        elif isinstance(ex, ClsExample):
            pool.append(ClsExample(ex.uid, ex.name, ex.tag, ex.poi, None))
        else:
            pool.append(NerExample(ex.uid, ex.text, None))
    return LabeledSet(corpus.task, labeled), UnlabeledPool(corpus.task, pool)
