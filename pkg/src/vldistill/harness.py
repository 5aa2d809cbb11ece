"""Training loops, evaluation and run bookkeeping.

All loops share one step function. A run is a pure function of its configs,
corpus and seed: batch indices, ITM swaps, masks and queue sampling each
draw from their own ``(seed, label)`` stream, so switching distillation on
or off never perturbs the randomness the plain loop sees.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor, no_grad
from .checkpoint import Checkpoint
from .losses import (
    DistillConfig,
    ProjectionParams,
    SampleQueue,
    attention_loss,
    classification_loss,
    hidden_mse_loss,
    init_queue,
    nce_hidden_loss,
    pooled_mse_loss,
    queue_update,
    token_mask,
    uniform_layer_map,
)
from .objectives import (
    EmptyWordSegment,
    TaskHead,
    answer_loss,
    finetune_total,
    itm_choose,
    itm_loss,
    mask_tokens,
    mlm_loss,
    pretrain_total,
)
from .rng import Rng
from .tokens import (
    MASK,
    SEP,
    ConfigError,
    Limits,
    Record,
    TokenSequence,
    VOCAB,
    collate,
    _vocab,
)
from .transformer import Transformer, TransformerConfig

log = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "MetricsLog",
    "TrainingDiverged",
    "DataLeakError",
    "AdamW",
    "TEACHER_VIEW",
    "ALIGNED_TEACHER_VIEW",
    "STUDENT_VIEW",
    "model_config_for",
    "train_vlp",
    "train_teacher",
    "adapt_teacher",
    "distill_pretrain",
    "finetune",
    "evaluate",
    "attention_distance",
    "attention_maps",
    "step_losses",
    "model_from_checkpoint",
]

# (detector, feature extractor) pairs
TEACHER_VIEW = ("strong", "teacher")          # teacher's own detector
ALIGNED_TEACHER_VIEW = ("light", "teacher")   # student's boxes, teacher's features
STUDENT_VIEW = ("light", "student")

TASKS = ("pretrain", "qa", "caption")


class TrainingDiverged(RuntimeError):
    pass


class DataLeakError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 400
    epochs: float | None = None       # when set, overrides steps
    batch_size: int = 32
    learning_rate: float = 3e-3
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warmup_steps: int = 0
    seed: int = 0
    data_fraction: float = 1.0
    cap_len: int = 8
    tag_len: int = 4
    vis_len: int = 6
    corpus_path: str | None = None

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size <= 0:
            raise ConfigError("learning_rate and batch_size must be positive")
        if self.steps < 0 or (self.epochs is not None and self.epochs <= 0):
            raise ConfigError("steps must be >= 0 and epochs positive")
        if not 0 < self.data_fraction <= 1:
            raise ConfigError(f"data_fraction must be in (0, 1], got {self.data_fraction}")

    @property
    def limits(self) -> Limits:
        return Limits(self.cap_len, self.tag_len, self.vis_len)

    def num_steps(self, n_records: int) -> int:
        if self.epochs is None:
            return self.steps
        return max(1, math.ceil(self.epochs * n_records / self.batch_size))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)

    def with_(self, **kw) -> "TrainConfig":
        return replace(self, **kw)


class MetricsLog:
    """Append-only per-step records, serialised as JSON lines."""

    def __init__(self, records: list | None = None):
        self.records: list[dict] = list(records or [])

    def append(self, record: dict) -> None:
        if self.records and record["step"] <= self.records[-1]["step"]:
            raise ValueError("metrics steps must increase")
        self.records.append(record)

    def __len__(self):
        return len(self.records)

    def __getitem__(self, i):
        return self.records[i]

    def __iter__(self):
        return iter(self.records)

    def __eq__(self, other):
        return isinstance(other, MetricsLog) and self.dumps() == other.dumps()

    def column(self, key: str) -> np.ndarray:
        return np.array([r[key] for r in self.records])

    def dumps(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.dumps())

    @classmethod
    def read(cls, path) -> "MetricsLog":
        with open(path, encoding="utf-8") as fh:
            return cls([json.loads(line) for line in fh if line.strip()])


class AdamW:
    """Adam with decoupled weight decay; biases, norms and embeddings are not decayed."""

    def __init__(self, params: dict, cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.decay = {k: p.data.ndim == 2 and not k.startswith("emb.") for k, p in params.items()}

    def lr(self) -> float:
        c = self.cfg
        if c.warmup_steps and self.t <= c.warmup_steps:
            return c.learning_rate * self.t / c.warmup_steps
        return c.learning_rate

    def step(self) -> None:
        c = self.cfg
        self.t += 1
        lr = self.lr()
        bc1 = 1.0 - c.beta1**self.t
        bc2 = 1.0 - c.beta2**self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m, v = self.m[k], self.v[k]
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * (g * g)
            if self.decay[k] and c.weight_decay:
                p.data *= np.float32(1.0 - lr * c.weight_decay)
            upd = (m / bc1) / (np.sqrt(v / bc2) + c.eps)
            p.data -= (lr * upd).astype(p.data.dtype)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


# -- model/config helpers ---------------------------------------------------------------

def model_config_for(role: str, corpus: Sequence[Record], train: TrainConfig,
                     num_answers: int = 8, **overrides) -> TransformerConfig:
    """Desk-scale default architecture for ``role`` sized to the corpus."""
    rec = corpus[0]
    key = "light/teacher" if role == "teacher" else "light/student"
    feat_dim = rec.features[key].shape[1]
    base = TransformerConfig.teacher if role == "teacher" else TransformerConfig.student
    return base(vocab_size=len(_vocab(rec.num_classes)), visual_dim=feat_dim + 6,
                max_tokens=train.limits.total, num_answers=num_answers, **overrides)


def model_from_checkpoint(ckpt: Checkpoint) -> Transformer:
    cfg = TransformerConfig.from_dict(ckpt.config["model"])
    params = {k: Tensor(v.copy()) for k, v in ckpt.params.items() if not k.startswith("distill.")}
    return Transformer(cfg, params)


def _scene_ranges(ids: Sequence[int]) -> list[list[int]]:
    out: list[list[int]] = []
    for i in sorted(ids):
        if out and out[-1][1] == i:
            out[-1][1] = i + 1
        else:
            out.append([i, i + 1])
    return out


def _in_ranges(i: int, ranges) -> bool:
    return any(a <= i < b for a, b in ranges)


def _subset(corpus: Sequence[Record], fraction: float) -> list[Record]:
    if fraction >= 1.0:
        return list(corpus)
    n = max(2, int(round(len(corpus) * fraction)))
    # prefixes of one fixed permutation, so smaller fractions nest inside larger ones
    idx = np.sort(Rng(0, "subset").permutation(len(corpus))[:n])
    return [corpus[i] for i in idx]


def _make_checkpoint(model: Transformer, extra: dict, config: dict, seed: int, step: int,
                     metrics: MetricsLog | None) -> Checkpoint:
    params = {k: v.data.astype(np.float32).copy() for k, v in model.params.items()}
    for k, v in extra.items():
        params[k] = np.asarray(v, dtype=np.float32).copy()
    ckpt = Checkpoint(params, config, {"seed": int(seed), "next_step": int(step) + 1}, int(step))
    ckpt.metrics = metrics
    return ckpt


# -- batches ------------------------------------------------------------------------------

class _Sequences:
    """Cache of unmasked sequences per (record, view)."""

    def __init__(self, corpus: Sequence[Record], limits: Limits):
        self.corpus = corpus
        self.limits = limits
        self._cache: dict = {}

    def get(self, i: int, view: tuple, words=None) -> TokenSequence:
        key = (i, view)
        seq = self._cache.get(key)
        if seq is None:
            seq = self.corpus[i].sequence(view[0], view[1], self.limits)
            self._cache[key] = seq
        if words is not None:
            seq = seq.with_words(words)
        return seq


def _apply_mask(seq: TokenSequence, positions: np.ndarray) -> TokenSequence:
    out = seq.copy()
    out.ids[positions] = MASK
    return out


@dataclass
class _StepBatch:
    batches: dict            # view -> Batch
    plans: list              # MaskingPlan | None per row (None: excluded from MLM)
    itm_labels: np.ndarray
    answers: np.ndarray
    targets: np.ndarray      # caption-task target id per row
    target_pos: np.ndarray   # caption-task [MASK] position per row
    skipped: int = 0


QUESTION = None


def _question_ids(num_classes: int) -> list[int]:
    v = _vocab(num_classes)
    return [v.id("what"), v.id("main")]


def _build_step(seqs: _Sequences, idx: np.ndarray, views: Sequence[tuple], seed: int, step: int,
                task: str) -> _StepBatch:
    corpus = seqs.corpus
    n = len(corpus)
    per_view = {v: [] for v in views}
    plans, labels, answers, targets, tpos = [], [], [], [], []
    skipped = 0
    for j, i in enumerate(idx):
        i = int(i)
        rec = corpus[i]
        answers.append(rec.answer)
        if task == "pretrain":
            _, src, label = itm_choose(n, Rng(seed, "itm").child(step, j), i)
            words = None if src == i else corpus[src].caption
            base = [seqs.get(i, v, words) for v in views]
            labels.append(label)
            try:
                masked, plan = mask_tokens(base[0], Rng(seed, "mask").child(step, j))
            except EmptyWordSegment:
                skipped += 1
                plans.append(None)
                for v, s in zip(views, base):
                    per_view[v].append(s)
                continue
            plans.append(plan if label == 1 else None)
            for v, s in zip(views, base):
                per_view[v].append(_apply_mask(s, plan.positions))
        elif task == "qa":
            q = _question_ids(rec.num_classes)
            for v in views:
                per_view[v].append(seqs.get(i, v, q))
        elif task == "caption":
            cap = list(rec.caption)[: seqs.limits.cap_len]
            hi = len(cap) if len(cap) < seqs.limits.cap_len else len(cap) - 1
            k = int(Rng(seed, "prefix").child(step, j).integers(0, hi + 1))
            targets.append(cap[k] if k < len(cap) else SEP)
            tpos.append(1 + k)
            for v in views:
                per_view[v].append(seqs.get(i, v, cap[:k] + [MASK]))
        else:
            raise ConfigError(f"unknown task {task!r}")
    return _StepBatch(
        {v: collate(s) for v, s in per_view.items()}, plans,
        np.asarray(labels, dtype=np.float64), np.asarray(answers, dtype=np.int64),
        np.asarray(targets, dtype=np.int64), np.asarray(tpos, dtype=np.int64), skipped,
    )


def _batch_indices(n: int, train: TrainConfig, step: int) -> np.ndarray:
    r = Rng(train.seed, "batch").child(step)
    return r.choice(n, size=min(train.batch_size, n), replace=False)


# -- the shared step ----------------------------------------------------------------------

@dataclass
class _Distiller:
    teacher: Transformer
    teacher_view: tuple
    config: DistillConfig
    proj: ProjectionParams
    queue: SampleQueue | None
    on_enqueue: Callable | None = None

    def terms(self, tr_S, tr_T, batch) -> tuple[dict, np.ndarray | None]:
        c = self.config
        out, keys = {}, None
        modality = batch.modality
        pad = tr_S.pad_mask
        if c.alpha > 0:
            if c.att_scope == "layerwise":
                pairs = list(zip(tr_S.attention, tr_T.attention))
            else:
                pairs = [(tr_S.attention[-1], tr_T.attention[-1])]
            att = None
            for a_s, a_t in pairs:
                term = attention_loss(a_s, a_t, pad, c.token_scope, modality)
                att = term if att is None else att + term
            out["att"] = att * (1.0 / len(pairs))
        if c.beta > 0:
            mask = token_mask(pad, modality, c.token_scope)
            L_S, L_T = len(tr_S.hidden) - 1, len(tr_T.hidden) - 1
            if c.hid_variant == "mse_lastlayer":
                out["hid"] = hidden_mse_loss(tr_S.hidden, tr_T.hidden, self.proj.W_h, mask,
                                             [(L_S, L_T)])
            elif c.hid_variant == "mse_meanpool":
                out["hid"] = pooled_mse_loss(tr_S.hidden[-1], tr_T.hidden[-1], self.proj.W_h, mask)
            elif c.hid_variant == "mse_layerwise":
                out["hid"] = hidden_mse_loss(tr_S.hidden, tr_T.hidden, self.proj.W_h, mask,
                                             uniform_layer_map(L_S, L_T))
            else:
                pooling = "token" if c.hid_variant == "nce_token" else "meanpool"
                out["hid"], keys = nce_hidden_loss(tr_S.hidden[-1], tr_T.hidden[-1], self.queue,
                                                   self.proj.phi, c.tau, pooling, mask)
        return out, keys

    def enqueue(self, keys: np.ndarray, rng: Rng) -> None:
        K = self.queue.capacity
        if len(keys) > K:
            keep = np.sort(rng.choice(len(keys), size=K, replace=False))
            keys = keys[keep]
        if self.on_enqueue is not None:
            self.on_enqueue(keys.copy())
        queue_update(self.queue, keys)


def _forward_losses(model: Transformer, sb: _StepBatch, view: tuple, task: str,
                    distiller: _Distiller | None, distill: DistillConfig):
    """Return (total, components, extras) for one step batch."""
    p = model.params
    tr_S = model.forward(sb.batches[view])
    comps: dict[str, Tensor] = {}
    extras: dict = {}
    tr_T = None
    if distiller is not None:
        with no_grad():
            tr_T = distiller.teacher.forward(sb.batches[distiller.teacher_view])
    if task == "pretrain":
        if any(pl is not None for pl in sb.plans):
            comps["mlm"], logits, tgt = mlm_loss(tr_S, TaskHead.from_params(p, "mlm_vocab"), sb.plans)
            extras["acc"] = float((logits.data.argmax(-1) == tgt).mean())
        else:
            comps["mlm"] = Tensor(np.zeros((), np.float32))
            extras["acc"] = 0.0
        comps["itm"] = itm_loss(tr_S, TaskHead.from_params(p, "itm_binary"), sb.itm_labels)
    elif task == "qa":
        comps["ce"], logits = answer_loss(tr_S, TaskHead.from_params(p, "answer_classifier"), sb.answers)
        extras["acc"] = float((logits.data.argmax(-1) == sb.answers).mean())
        if distiller is not None and distill.cls_weight > 0:
            z_T = TaskHead.from_params(distiller.teacher.params, "answer_classifier")(tr_T.pooled_cls)
            comps["cls"] = classification_loss(logits, z_T.data, distill.tau_d)
    elif task == "caption":
        rows = np.arange(len(sb.targets))
        head = TaskHead.from_params(p, "mlm_vocab")
        logits = head(tr_S.hidden[-1][rows, sb.target_pos])
        comps["ce"] = ag.cross_entropy(logits, sb.targets)
        extras["acc"] = float((logits.data.argmax(-1) == sb.targets).mean())
        if distiller is not None and distill.cls_weight > 0:
            t_head = TaskHead.from_params(distiller.teacher.params, "mlm_vocab")
            with no_grad():
                z_T = t_head(tr_T.hidden[-1][rows, sb.target_pos])
            comps["cls"] = classification_loss(logits, z_T.data, distill.tau_d)
    keys = None
    if distiller is not None:
        d_terms, keys = distiller.terms(tr_S, tr_T, sb.batches[view])
        comps.update(d_terms)
    if task == "pretrain":
        total = pretrain_total(comps, distill)
    else:
        total = finetune_total(comps, distill)
    extras["keys"] = keys
    extras["trace"] = tr_S
    return total, comps, extras


_LOG_KEYS = {"pretrain": ("mlm", "itm", "att", "hid"), "qa": ("ce", "cls", "att", "hid"),
             "caption": ("ce", "cls", "att", "hid")}


def _run(model: Transformer, corpus: Sequence[Record], train: TrainConfig, view: tuple,
         task: str = "pretrain", distill: DistillConfig | None = None,
         teacher: Transformer | None = None, teacher_view: tuple | None = None,
         proj: ProjectionParams | None = None, queue: SampleQueue | None = None,
         on_enqueue: Callable | None = None, config_extra: dict | None = None,
         role: str = "student") -> Checkpoint:
    if task not in TASKS:
        raise ConfigError(f"unknown task {task!r}")
    distill = distill or DistillConfig.off()
    data = _subset(corpus, train.data_fraction)
    if len(data) < 2:
        raise ConfigError("training corpus needs at least 2 records")
    steps = train.num_steps(len(data))
    seqs = _Sequences(data, train.limits)
    views = [view] if teacher is None else [view, teacher_view]
    distiller = None
    if teacher is not None:
        distiller = _Distiller(teacher, teacher_view, distill, proj, queue, on_enqueue)
    trainable = dict(model.params)
    if proj is not None:
        trainable.update(proj.as_dict())
    opt = AdamW(trainable, train)
    metrics = MetricsLog()
    skipped = 0
    log_keys = _LOG_KEYS[task]
    for step in range(1, steps + 1):
        idx = _batch_indices(len(data), train, step)
        sb = _build_step(seqs, idx, views, train.seed, step, task)
        skipped += sb.skipped
        opt.zero_grad()
        total, comps, extras = _forward_losses(model, sb, view, task, distiller, distill)
        record = {"step": step}
        for k in log_keys:
            record[k] = float(comps[k].data) if k in comps else 0.0
        record["total"] = float(total.data)
        record["acc"] = extras["acc"]
        if not all(math.isfinite(v) for v in record.values()):
            raise TrainingDiverged(f"non-finite loss at step {step}: {record}")
        total.backward()
        opt.step()
        if extras["keys"] is not None:
            distiller.enqueue(extras["keys"], Rng(train.seed, "enqueue").child(step))
        metrics.append(record)
    if skipped:
        log.warning("skipped MLM on %d records with empty captions", skipped)
    config = {
        "role": role,
        "task": task,
        "view": list(view),
        "model": model.config.to_dict(),
        "train": train.to_dict(),
        "distill": distill.to_dict(),
        "train_scene_ids": _scene_ranges([r.scene_id for r in data]),
        "num_classes": data[0].num_classes,
    }
    if teacher_view is not None:
        config["teacher_view"] = list(teacher_view)
    config.update(config_extra or {})
    extra = {}
    if proj is not None:
        extra.update({k: v.data for k, v in proj.as_dict().items()})
    if queue is not None:
        extra["distill.queue"] = queue.entries
        config["queue_cursor"] = queue.write_cursor
    return _make_checkpoint(model, extra, config, train.seed, steps, metrics)


# -- public loops -------------------------------------------------------------------------

def train_vlp(model_config: TransformerConfig, corpus: Sequence[Record], train: TrainConfig,
              view: tuple = STUDENT_VIEW, role: str = "student") -> Checkpoint:
    """Plain VLP (MLM + ITM) from a seeded random init; no teacher involved."""
    model = Transformer.init(model_config, Rng(train.seed, "init"))
    return _run(model, corpus, train, view, "pretrain", role=role)


def train_teacher(config: TrainConfig, corpus: Sequence[Record],
                  model_config: TransformerConfig | None = None,
                  view: tuple = TEACHER_VIEW) -> Checkpoint:
    """Teacher VLP on its own detector's tokens; distillation weights are forced to zero."""
    model_config = model_config or model_config_for("teacher", corpus, config)
    return train_vlp(model_config, corpus, config, view, role="teacher")


def adapt_teacher(teacher_ckpt: Checkpoint, aligned_corpus: Sequence[Record],
                  config: TrainConfig, view: tuple = ALIGNED_TEACHER_VIEW) -> Checkpoint:
    """Continue teacher VLP on student-detector boxes with teacher features."""
    model = model_from_checkpoint(teacher_ckpt)
    for t in model.params.values():
        t.requires_grad = True
    return _run(model, aligned_corpus, config, view, "pretrain", role="teacher",
                config_extra={"adapted_from_step": teacher_ckpt.step})


def _frozen_teacher(ckpt: Checkpoint) -> Transformer:
    return model_from_checkpoint(ckpt).freeze()


def distill_pretrain(teacher_ckpt: Checkpoint, student_config: TransformerConfig | None,
                     corpus: Sequence[Record], distill: DistillConfig, train: TrainConfig,
                     teacher_view: tuple = ALIGNED_TEACHER_VIEW,
                     on_enqueue: Callable | None = None) -> Checkpoint:
    """VLP + attention/hidden distillation from a frozen teacher.

    Per step: teacher forward (no grad), student forward, combined loss,
    update of student + W_h + phi, then the queue update.
    """
    teacher = _frozen_teacher(teacher_ckpt)
    student_config = student_config or model_config_for("student", corpus, train,
                                                         teacher.config.num_answers)
    if distill.alpha > 0 and distill.att_scope == "layerwise" and \
            student_config.num_layers != teacher.config.num_layers:
        raise ConfigError(
            f"att_scope=layerwise needs equal layer counts, got student "
            f"{student_config.num_layers} vs teacher {teacher.config.num_layers}")
    if distill.alpha > 0 and student_config.num_heads != teacher.config.num_heads:
        raise ConfigError(f"attention distillation needs equal head counts, got student "
                          f"{student_config.num_heads} vs teacher {teacher.config.num_heads}")
    model = Transformer.init(student_config, Rng(train.seed, "init"))
    d_S, d_T = student_config.hidden_dim, teacher.config.hidden_dim
    proj = ProjectionParams.init(d_S, d_T, Rng(train.seed, "distill-head"))
    queue = init_queue(distill.queue_size, d_T, Rng(train.seed, "queue-init")) \
        if distill.uses_queue else None
    return _run(model, corpus, train, STUDENT_VIEW, "pretrain", distill, teacher, teacher_view,
                proj, queue, on_enqueue, role="student",
                config_extra={"teacher_step": teacher_ckpt.step})


def finetune(student_ckpt: Checkpoint, task: str, teacher_task_ckpt: Checkpoint | None,
             distill: DistillConfig, train: TrainConfig, corpus: Sequence[Record],
             view: tuple | None = None, teacher_view: tuple = ALIGNED_TEACHER_VIEW) -> Checkpoint:
    """Downstream training on ``task`` ("qa" or "caption"), optionally with
    soft-label / attention / hidden distillation from a task-tuned teacher."""
    if task not in ("qa", "caption"):
        raise ConfigError(f"finetune task must be 'qa' or 'caption', got {task!r}")
    wants_teacher = distill.cls_weight > 0 or distill.alpha > 0 or distill.beta > 0
    if wants_teacher and teacher_task_ckpt is None:
        raise ConfigError("distillation weights are non-zero but no teacher checkpoint was given")
    view = tuple(view or student_ckpt.config.get("view", STUDENT_VIEW))
    model = model_from_checkpoint(student_ckpt)
    for t in model.params.values():
        t.requires_grad = True
    teacher = proj = queue = None
    if wants_teacher:
        teacher = _frozen_teacher(teacher_task_ckpt)
        if distill.alpha > 0 and model.config.num_heads != teacher.config.num_heads:
            raise ConfigError("attention distillation needs equal head counts")
        d_S, d_T = model.config.hidden_dim, teacher.config.hidden_dim
        proj = ProjectionParams.init(d_S, d_T, Rng(train.seed, "distill-head"))
        if distill.uses_queue:
            queue = init_queue(distill.queue_size, d_T, Rng(train.seed, "queue-init"))
    return _run(model, corpus, train, view, task, distill, teacher,
                teacher_view if teacher is not None else None, proj, queue,
                role=student_ckpt.config.get("role", "student"),
                config_extra={"base_step": student_ckpt.step})


def step_losses(ckpt: Checkpoint, corpus: Sequence[Record], train: TrainConfig, step: int,
                task: str = "pretrain", view: tuple | None = None) -> dict:
    """Recompute the (non-distilled) loss components a run would log at ``step``
    if its parameters were those of ``ckpt``."""
    model = model_from_checkpoint(ckpt)
    view = tuple(view or ckpt.config.get("view", STUDENT_VIEW))
    data = _subset(corpus, train.data_fraction)
    seqs = _Sequences(data, train.limits)
    sb = _build_step(seqs, _batch_indices(len(data), train, step), [view], train.seed, step, task)
    with no_grad():
        total, comps, extras = _forward_losses(model, sb, view, task, None, DistillConfig.off())
    out = {k: float(v.data) for k, v in comps.items()}
    out["total"] = float(total.data)
    out["acc"] = extras["acc"]
    return out


# -- evaluation ---------------------------------------------------------------------------

def _check_disjoint(ckpt: Checkpoint, corpus: Sequence[Record]) -> None:
    ranges = ckpt.config.get("train_scene_ids", [])
    clash = [r.scene_id for r in corpus if _in_ranges(r.scene_id, ranges)]
    if clash:
        raise DataLeakError(f"{len(clash)} eval scene_ids overlap training data, e.g. {clash[:5]}")


def _chunks(n: int, size: int):
    for a in range(0, n, size):
        yield a, min(n, a + size)


def greedy_decode_batch(model: Transformer, seqs: Sequence[TokenSequence],
                        max_len: int | None = None) -> list[list[int]]:
    """Batched form of :func:`objectives.greedy_decode`."""
    cap = seqs[0].limits.cap_len
    max_len = cap if max_len is None else max_len
    head = TaskHead.from_params(model.params, "mlm_vocab")
    words = [[] for _ in seqs]
    live = list(range(len(seqs)))
    with no_grad():
        for k in range(max_len):
            if not live:
                break
            probe = collate([seqs[i].with_words(words[i] + [MASK]) for i in live])
            trace = model.forward(probe)
            pred = head(trace.hidden[-1][:, 1 + k, :]).data.argmax(-1)
            nxt = []
            for i, tok in zip(live, pred):
                if int(tok) == SEP:
                    continue
                words[i].append(int(tok))
                nxt.append(i)
            live = nxt
    return words


def evaluate(ckpt: Checkpoint, eval_corpus: Sequence[Record], task: str = "pretrain",
             view: tuple | None = None, rounds: int = 4, seed: int = 0,
             batch_size: int = 256) -> dict:
    """Masked-token accuracy (always), plus QA accuracy or exact-caption rate.

    Masks come from ``Rng(seed, "eval-mask")`` keyed by scene id and round,
    so the score depends only on the checkpoint and the corpus.
    """
    if task not in TASKS:
        raise ConfigError(f"unknown task {task!r}")
    _check_disjoint(ckpt, eval_corpus)
    model = model_from_checkpoint(ckpt)
    view = tuple(view or ckpt.config.get("view", STUDENT_VIEW))
    limits = Limits(**{k: ckpt.config["train"][k] for k in ("cap_len", "tag_len", "vis_len")}) \
        if "train" in ckpt.config else Limits()
    base = [r.sequence(view[0], view[1], limits) for r in eval_corpus]
    mlm_head = TaskHead.from_params(model.params, "mlm_vocab")

    masked, rows_tgt = [], []
    for r in range(rounds):
        for rec, seq in zip(eval_corpus, base):
            try:
                m, plan = mask_tokens(seq, Rng(seed, "eval-mask").child(rec.scene_id, r))
            except EmptyWordSegment:
                continue
            masked.append(m)
            rows_tgt.append(plan)
    correct = total = 0
    loss_sum = 0.0
    with no_grad():
        for a, b in _chunks(len(masked), batch_size):
            trace = model.forward(collate(masked[a:b]))
            loss, logits, tgt = mlm_loss(trace, mlm_head, rows_tgt[a:b])
            correct += int((logits.data.argmax(-1) == tgt).sum())
            total += len(tgt)
            loss_sum += float(loss.data) * len(tgt)
    metrics = {
        "masked_token_accuracy": correct / max(total, 1),
        "mean_loss": loss_sum / max(total, 1),
        "num_records": len(eval_corpus),
        "num_masked": total,
    }
    if task == "qa":
        q = _question_ids(eval_corpus[0].num_classes)
        qa_head = TaskHead.from_params(model.params, "answer_classifier")
        answers = np.array([r.answer for r in eval_corpus])
        preds = []
        with no_grad():
            for a, b in _chunks(len(base), batch_size):
                tr = model.forward(collate([s.with_words(q) for s in base[a:b]]))
                preds.append(qa_head(tr.pooled_cls).data.argmax(-1))
        metrics["task_accuracy"] = float((np.concatenate(preds) == answers).mean())
    elif task == "caption":
        empty = [s.with_words([]) for s in base]
        decoded = greedy_decode_batch(model, empty, limits.cap_len)
        hits = [d == list(r.caption)[: limits.cap_len] for d, r in zip(decoded, eval_corpus)]
        metrics["caption_exact_match"] = float(np.mean(hits))
    return metrics


def attention_maps(ckpt: Checkpoint, corpus: Sequence[Record], view: tuple,
                   batch_size: int = 256) -> list[np.ndarray]:
    """Head-averaged last-layer attention per record, cropped to valid tokens."""
    model = model_from_checkpoint(ckpt)
    limits = Limits(**{k: ckpt.config["train"][k] for k in ("cap_len", "tag_len", "vis_len")}) \
        if "train" in ckpt.config else Limits()
    seqs = [r.sequence(view[0], view[1], limits) for r in corpus]
    out = []
    with no_grad():
        for a, b in _chunks(len(seqs), batch_size):
            tr = model.forward(collate(seqs[a:b]))
            att = tr.attention[-1].data.mean(axis=1)
            for k, s in enumerate(seqs[a:b]):
                n = int(s.pad_mask.sum())
                out.append(att[k, :n, :n].astype(np.float64))
    return out


def attention_distance(student_ckpt: Checkpoint, teacher_ckpt: Checkpoint,
                       eval_corpus: Sequence[Record], student_view: tuple = STUDENT_VIEW,
                       teacher_view: tuple = ALIGNED_TEACHER_VIEW,
                       per_record: bool = False):
    """Mean Frobenius distance between head-averaged last-layer attention maps."""
    s_maps = attention_maps(student_ckpt, eval_corpus, student_view)
    t_maps = attention_maps(teacher_ckpt, eval_corpus, teacher_view)
    dists = []
    for rec, a, b in zip(eval_corpus, s_maps, t_maps):
        if a.shape != b.shape:
            raise ConfigError(f"scene {rec.scene_id}: token counts differ "
                              f"({a.shape[0]} vs {b.shape[0]}); inputs are not aligned")
        dists.append(float(np.linalg.norm(a - b)))
    mean = float(np.mean(dists)) if dists else 0.0
    return (mean, dists) if per_record else mean
