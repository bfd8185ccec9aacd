"""Example containers shared by the corpus generator and the pipeline."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

TASK_CLASSIFICATION = "classification"
TASK_NER = "ner"
TASKS = (TASK_CLASSIFICATION, TASK_NER)

GOLD = "gold"
PSEUDO = "pseudo"


@dataclass(frozen=True)
class ClsExample:
    uid: int
    name: str
    tag: str
    poi: str
    label: Optional[int] = None
    provenance: str = GOLD


@dataclass(frozen=True)
class NerExample:
    uid: int
    text: str
    tags: Optional[tuple[str, ...]] = None
    provenance: str = GOLD


@dataclass
class LabeledSet:
    """Examples with gold labels; disjoint from any test set by uid."""

    task: str
    examples: list = field(default_factory=list)

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        for ex in self.examples:
            if self.task == TASK_CLASSIFICATION and ex.label is None:
                raise ValueError(f"example {ex.uid} is missing its label")
            if self.task == TASK_NER and ex.tags is None:
                raise ValueError(f"example {ex.uid} is missing its tags")

    def __len__(self):
        return len(self.examples)

    def uids(self) -> set:
        return {ex.uid for ex in self.examples}


@dataclass
class UnlabeledPool:
    """Examples whose labels have been discarded."""

    task: str
    examples: list = field(default_factory=list)

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")

    def __len__(self):
        return len(self.examples)

    def uids(self) -> set:
        return {ex.uid for ex in self.examples}


def tag_vocabulary(entity_types: Sequence[str]) -> list[str]:
    """BIO tag list: O first, then B-/I- per type in order."""
    tags = ["O"]
    for t in entity_types:
        tags.extend([f"B-{t}", f"I-{t}"])
    return tags
