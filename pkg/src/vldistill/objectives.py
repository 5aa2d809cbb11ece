"""Pre-training objectives (MLM, ITM), downstream heads and loss composition."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor, no_grad
from .losses import DistillConfig
from .rng import Rng
from .tokens import MASK, SEP, ConfigError, Limits, TokenSequence, collate

__all__ = [
    "MASK_RATE",
    "EmptyWordSegment",
    "MaskingPlan",
    "TaskHead",
    "mask_tokens",
    "num_to_mask",
    "mlm_loss",
    "itm_choose",
    "itm_make_pair",
    "itm_loss",
    "answer_loss",
    "pretrain_total",
    "finetune_total",
    "greedy_decode",
]

MASK_RATE = 0.15


class EmptyWordSegment(ValueError):
    """A record has no caption tokens to mask."""


@dataclass(frozen=True)
class MaskingPlan:
    positions: np.ndarray      # sequence indices, all inside the word segment
    original_ids: np.ndarray
    rng_stream: str


@dataclass
class TaskHead:
    kind: str          # mlm_vocab | itm_binary | answer_classifier
    weight: Tensor
    bias: Tensor

    _PARAM = {"mlm_vocab": "head.mlm", "itm_binary": "head.itm", "answer_classifier": "head.qa"}

    @classmethod
    def from_params(cls, params: dict, kind: str) -> "TaskHead":
        prefix = cls._PARAM[kind]
        return cls(kind, params[prefix + ".w"], params[prefix + ".b"])

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias


def num_to_mask(n_words: int) -> int:
    # integer form of ceil(0.15 * n), immune to float rounding
    return -(-n_words * 15 // 100)


def mask_tokens(seq: TokenSequence, rng: Rng):
    """Replace ceil(15%) of the caption tokens with [MASK]."""
    word_pos = seq.word_positions
    if len(word_pos) == 0:
        raise EmptyWordSegment("word segment is empty")
    k = num_to_mask(len(word_pos))
    picked = np.sort(rng.choice(word_pos, size=k, replace=False))
    masked = seq.copy()
    original = masked.ids[picked].copy()
    masked.ids[picked] = MASK
    return masked, MaskingPlan(picked, original, rng.stream_label)


def _plans_to_targets(plans) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if isinstance(plans, MaskingPlan):
        plans = [plans]
    rows, cols, tgt = [], [], []
    for r, plan in enumerate(plans):
        if plan is None:
            continue
        rows.extend([r] * len(plan.positions))
        cols.extend(plan.positions.tolist())
        tgt.extend(plan.original_ids.tolist())
    return (np.asarray(rows, dtype=np.int64), np.asarray(cols, dtype=np.int64),
            np.asarray(tgt, dtype=np.int64))


def mlm_loss(trace, head: TaskHead, plan):
    """Mean CE over masked positions. ``plan`` is one plan or one per batch row
    (``None`` rows are skipped). Returns ``(loss, logits, targets)``."""
    rows, cols, targets = _plans_to_targets(plan)
    if rows.size == 0:
        raise ValueError("mlm_loss: masking plan is empty")
    h = trace.hidden[-1]
    if h.ndim == 2:
        h = h.reshape(1, *h.shape)
    logits = head(h[rows, cols])
    return ag.cross_entropy(logits, targets), logits, targets


def itm_choose(n_records: int, rng: Rng, index: int | None = None):
    """Pick (anchor, caption source, label). label 1 = matched, 0 = swapped caption."""
    if n_records < 2:
        raise ValueError("image-text matching needs at least 2 records")
    if index is None:
        index = int(rng.integers(n_records))
    if rng.random() < 0.5:
        other = int(rng.integers(n_records - 1))
        other += other >= index
        return index, other, 0
    return index, index, 1


def itm_make_pair(corpus: Sequence, rng: Rng, index: int | None = None,
                  detector: str = "light", role: str = "student", limits: Limits = Limits()):
    i, src, label = itm_choose(len(corpus), rng, index)
    seq = corpus[i].sequence(detector, role, limits, caption=corpus[src].caption)
    return seq, label


def itm_loss(trace, head: TaskHead, label) -> Tensor:
    pooled = trace.pooled_cls
    if pooled.ndim == 1:
        pooled = pooled.reshape(1, -1)
    logit = head(pooled).reshape(-1)
    return ag.bce_with_logits(logit, np.atleast_1d(np.asarray(label, dtype=float)))


def answer_loss(trace, head: TaskHead, answers) -> tuple[Tensor, Tensor]:
    pooled = trace.pooled_cls
    if pooled.ndim == 1:
        pooled = pooled.reshape(1, -1)
    logits = head(pooled)
    return ag.cross_entropy(logits, np.atleast_1d(answers)), logits


def pretrain_total(losses: dict, config: DistillConfig) -> Tensor:
    """``mlm + itm + alpha * att + beta * hid``; zero-weight terms are not added at all.

    ``config.vlp_weight`` scales the VLP pair (1 leaves it untouched, 0 drops it).
    """
    terms = []
    if config.vlp_weight == 1.0:
        terms.append(losses["mlm"] + losses["itm"])
    elif config.vlp_weight > 0:
        terms.append((losses["mlm"] + losses["itm"]) * config.vlp_weight)
    if config.alpha > 0:
        terms.append(losses["att"] * config.alpha)
    if config.beta > 0:
        terms.append(losses["hid"] * config.beta)
    if not terms:
        raise ConfigError("pre-training objective has no terms with non-zero weight")
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total


def finetune_total(losses: dict, config: DistillConfig) -> Tensor:
    """``ce_weight * ce + cls_weight * cls + alpha * att + beta * hid``."""
    total = losses["ce"] if config.ce_weight == 1.0 else losses["ce"] * config.ce_weight
    for key, w in (("cls", config.cls_weight), ("att", config.alpha), ("hid", config.beta)):
        if w > 0:
            total = total + losses[key] * w
    return total


def greedy_decode(model, seq: TokenSequence, max_len: int | None = None) -> list[int]:
    """Fill caption slots one at a time: append [MASK], take the argmax, repeat.

    Stops when the model predicts [SEP] or ``max_len`` words are produced.
    """
    cap = seq.limits.cap_len
    max_len = cap if max_len is None else max_len
    if max_len > cap:
        raise ValueError(f"max_len {max_len} exceeds caption capacity {cap}")
    head = TaskHead.from_params(model.params, "mlm_vocab")
    words: list[int] = []
    with no_grad():
        while len(words) < max_len:
            probe = seq.with_words(words + [MASK])
            trace = model.forward(collate([probe]))
            pos = 1 + len(words)
            logits = head(trace.hidden[-1][:, pos, :]).data[0]
            tok = int(np.argmax(logits))
            if tok == SEP:
                break
            words.append(tok)
    return words
