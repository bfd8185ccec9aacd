"""Training objectives: masked-character CE, classification CE, logits
distillation (KL), linear-chain CRF likelihood, and Viterbi decoding.

CRF conventions: a path through tags y_1..y_T scores
start[y_1] + sum_t emissions[t, y_t] + sum_t transitions[y_{t-1}, y_t] + end[y_T].
Masks must select a contiguous prefix of each sequence (shorter sequences are
left-aligned by the packing layer); the partition function and gold score are
computed in log-space over exactly the unmasked prefix.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

IGNORE_INDEX = -1


class LossVariant(enum.Enum):
    """The four task-specific pre-training losses."""

    LABEL_CE_PLUS_MLM = "label_ce_plus_mlm"
    LABEL_CE_ONLY = "label_ce_only"
    LOGITS_KL_PLUS_MLM = "logits_kl_plus_mlm"
    LOGITS_KL_ONLY = "logits_kl_only"

    @property
    def includes_mlm(self) -> bool:
        return self in (LossVariant.LABEL_CE_PLUS_MLM, LossVariant.LOGITS_KL_PLUS_MLM)

    @property
    def uses_logits(self) -> bool:
        return self in (LossVariant.LOGITS_KL_PLUS_MLM, LossVariant.LOGITS_KL_ONLY)

    @classmethod
    def parse(cls, value) -> "LossVariant":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(
                f"unknown loss variant {value!r}; expected one of "
                f"{[v.value for v in cls]}"
            ) from None


class InputVariant(enum.Enum):
    """Whether task-specific pre-training feeds masked or original text."""

    MASKED = "masked"
    NOMASK = "nomask"

    @classmethod
    def parse(cls, value) -> "InputVariant":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(
                f"unknown input variant {value!r}; expected one of "
                f"{[v.value for v in cls]}"
            ) from None


@dataclass
class CrfParams:
    """Tag-to-tag transition scores plus boundary scores."""

    transitions: Tensor  # [K, K], score of moving from tag i to tag j
    start_scores: Tensor  # [K]
    end_scores: Tensor  # [K]

    def __post_init__(self):
        k = self.transitions.shape[0]
        if self.transitions.shape != (k, k):
            raise ValueError("transitions must be square")
        if self.start_scores.shape != (k,) or self.end_scores.shape != (k,):
            raise ValueError("boundary scores must match the tag count")

    @property
    def num_tags(self) -> int:
        return self.transitions.shape[0]


# -- classification / MLM / distillation -----------------------------------


def mlm_loss(mlm_logits: Tensor, mlm_labels: np.ndarray) -> Tensor:
    """Mean cross-entropy over masked positions (labels of IGNORE_INDEX skip)."""
    labels = np.asarray(mlm_labels)
    rows, cols = np.nonzero(labels != IGNORE_INDEX)
    if rows.size == 0:
        return Tensor(np.zeros((), dtype=mlm_logits.dtype))
    picked = mlm_logits[rows, cols]  # [M, V]
    logp = T.log_softmax(picked, axis=-1)
    chosen = logp[np.arange(rows.size), labels[rows, cols]]
    return T.neg(chosen.mean())


def classification_ce_loss(cls_logits: Tensor, label_ids: np.ndarray) -> Tensor:
    """Mean negative log-softmax of the gold class."""
    labels = np.asarray(label_ids)
    n_classes = cls_logits.shape[-1]
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"label out of range [0, {n_classes}): {labels.min()}..{labels.max()}")
    logp = T.log_softmax(cls_logits, axis=-1)
    chosen = logp[np.arange(labels.shape[0]), labels]
    return T.neg(chosen.mean())


def kl_logits_loss(teacher_logits, student_logits: Tensor, temperature: float = 1.0) -> Tensor:
    """Mean over examples of KL(teacher softmax || student softmax).

    Teacher scores never receive gradient; they are detached numpy values.
    """
    t = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits)
    if tuple(t.shape) != tuple(student_logits.shape):
        raise ValueError(f"teacher shape {t.shape} != student shape {tuple(student_logits.shape)}")
    t = t / temperature
    t = t - t.max(axis=-1, keepdims=True)
    e = np.exp(t)
    p = e / e.sum(axis=-1, keepdims=True)
    log_p = t - np.log(e.sum(axis=-1, keepdims=True))
    student = T.mul(student_logits, 1.0 / temperature) if temperature != 1.0 else student_logits
    log_q = T.log_softmax(student, axis=-1)
    # sum_k p_k (log p_k - log q_k), averaged over all leading axes
    cross = T.mul(log_q, Tensor(p, dtype=student_logits.dtype))
    entropy_term = float((p * log_p).sum())
    n_rows = int(np.prod(t.shape[:-1])) or 1
    return T.add(T.neg(T.mul(cross.sum(), 1.0 / n_rows)), entropy_term / n_rows)


def token_kl_loss(teacher_token_logits, student_token_logits: Tensor, mask: np.ndarray) -> Tensor:
    """Mean per-unmasked-token KL between emission distributions."""
    t = (
        teacher_token_logits.data
        if isinstance(teacher_token_logits, Tensor)
        else np.asarray(teacher_token_logits)
    )
    if tuple(t.shape) != tuple(student_token_logits.shape):
        raise ValueError(
            f"teacher shape {t.shape} != student shape {tuple(student_token_logits.shape)}"
        )
    mask = np.asarray(mask)
    rows, cols = np.nonzero(mask)
    if rows.size == 0:
        return Tensor(np.zeros((), dtype=student_token_logits.dtype))
    t_sel = t[rows, cols]  # [M, K]
    t_sel = t_sel - t_sel.max(axis=-1, keepdims=True)
    e = np.exp(t_sel)
    p = e / e.sum(axis=-1, keepdims=True)
    log_p = t_sel - np.log(e.sum(axis=-1, keepdims=True))
    s_sel = student_token_logits[rows, cols]
    log_q = T.log_softmax(s_sel, axis=-1)
    cross = T.mul(log_q, Tensor(p, dtype=student_token_logits.dtype))
    entropy_term = float((p * log_p).sum())
    return T.add(T.neg(T.mul(cross.sum(), 1.0 / rows.size)), entropy_term / rows.size)


def combined_loss(variant, task_loss: Tensor, mlm: Optional[Tensor] = None) -> Tensor:
    """Unweighted 1:1 sum of the task loss and (when the variant says so) MLM."""
    variant = LossVariant.parse(variant)
    if variant.includes_mlm:
        if mlm is None:
            raise ValueError(f"variant {variant.value} requires an mlm loss term")
        return T.add(task_loss, mlm)
    return task_loss


# -- linear-chain CRF --------------------------------------------------------


def _prep_crf_inputs(emissions, mask):
    """Coerce to batched [B, S, K] emissions and validate the prefix mask."""
    single = emissions.ndim == 2
    if single:
        emissions = T.reshape(emissions, (1,) + tuple(emissions.shape))
    mask = np.asarray(mask)
    if mask.ndim == 1:
        mask = mask[None, :]
    if mask.shape != tuple(emissions.shape[:2]):
        raise ValueError(f"mask shape {mask.shape} does not match emissions {tuple(emissions.shape)}")
    lengths = mask.sum(axis=1).astype(int)
    if (lengths == 0).any():
        raise ValueError("every sequence needs at least one unmasked position")
    # proper prefix: mask must be 1s followed by 0s
    expected = np.arange(mask.shape[1])[None, :] < lengths[:, None]
    if not np.array_equal(mask.astype(bool), expected):
        raise ValueError("mask must select a contiguous prefix of each sequence")
    return emissions, mask.astype(float), lengths, single


def crf_log_partition(emissions: Tensor, mask, crf: CrfParams):
    """log sum over all tag paths of exp(path score), via forward recursion.

    Returns a scalar for [S, K] input, a [B] tensor for [B, S, K] input.
    """
    emissions, fmask, lengths, single = _prep_crf_inputs(emissions, mask)
    batch, seq, k = emissions.shape
    trans = T.reshape(crf.transitions, (1, k, k))
    alpha = T.add(emissions[:, 0, :], T.reshape(crf.start_scores, (1, k)))
    for t in range(1, seq):
        inner = T.add(T.reshape(alpha, (batch, k, 1)), trans)
        new_alpha = T.add(T.logsumexp(inner, axis=1), emissions[:, t, :])
        step_mask = Tensor(fmask[:, t : t + 1], dtype=emissions.dtype)
        alpha = T.add(T.mul(new_alpha, step_mask), T.mul(alpha, 1.0 - step_mask.data))
    logz = T.logsumexp(T.add(alpha, T.reshape(crf.end_scores, (1, k))), axis=1)
    return logz[0] if single else logz


def _gold_path_score(emissions: Tensor, tags: np.ndarray, fmask: np.ndarray, lengths, crf: CrfParams):
    batch, seq, k = emissions.shape
    safe_tags = np.where(tags < 0, 0, tags)
    if (tags[fmask.astype(bool)] < 0).any() or (safe_tags >= k).any():
        raise ValueError(f"tag id outside [0, {k}) at an unmasked position")
    b_idx = np.arange(batch)[:, None]
    s_idx = np.arange(seq)[None, :]
    em = T.mul(emissions[b_idx, s_idx, safe_tags], Tensor(fmask, dtype=emissions.dtype))
    score = em.sum(axis=1)
    if seq > 1:
        tr = crf.transitions[safe_tags[:, :-1], safe_tags[:, 1:]]
        tr = T.mul(tr, Tensor(fmask[:, 1:], dtype=emissions.dtype))
        score = T.add(score, tr.sum(axis=1))
    first = crf.start_scores[safe_tags[:, 0]]
    last = crf.end_scores[safe_tags[np.arange(batch), lengths - 1]]
    return T.add(T.add(score, first), last)


def crf_nll(emissions: Tensor, tags, mask, crf: CrfParams) -> Tensor:
    """Mean (log-partition - gold path score); nonnegative up to float slack."""
    tags = np.asarray(tags)
    if tags.ndim == 1:
        tags = tags[None, :]
    emissions_b, fmask, lengths, _ = _prep_crf_inputs(emissions, mask)
    logz = crf_log_partition(emissions, mask, crf)
    if logz.ndim == 0:
        logz = T.reshape(logz, (1,))
    gold = _gold_path_score(emissions_b, tags, fmask, lengths, crf)
    return T.sub(logz, gold).mean()


def crf_viterbi(emissions, mask, crf: CrfParams) -> list[list[int]]:
    """Highest-scoring tag path per sequence; ties resolve to the lowest tag id.

    Decoding is pure numpy (no gradients).
    """
    em = emissions.data if isinstance(emissions, Tensor) else np.asarray(emissions)
    single = em.ndim == 2
    if single:
        em = em[None]
    mask = np.asarray(mask)
    if mask.ndim == 1:
        mask = mask[None, :]
    lengths = mask.sum(axis=1).astype(int)
    if (lengths == 0).any():
        raise ValueError("every sequence needs at least one unmasked position")
    trans = crf.transitions.data if isinstance(crf.transitions, Tensor) else np.asarray(crf.transitions)
    start = crf.start_scores.data if isinstance(crf.start_scores, Tensor) else np.asarray(crf.start_scores)
    end = crf.end_scores.data if isinstance(crf.end_scores, Tensor) else np.asarray(crf.end_scores)
    paths = []
    for b in range(em.shape[0]):
        n = lengths[b]
        scores = start + em[b, 0]
        backptr = np.zeros((n, trans.shape[0]), dtype=int)
        for t in range(1, n):
            cand = scores[:, None] + trans  # [from, to]
            backptr[t] = cand.argmax(axis=0)  # argmax returns the lowest index on ties
            scores = cand.max(axis=0) + em[b, t]
        scores = scores + end
        best = int(scores.argmax())
        path = [best]
        for t in range(n - 1, 0, -1):
            best = int(backptr[t, best])
            path.append(best)
        paths.append(path[::-1])
    return paths
