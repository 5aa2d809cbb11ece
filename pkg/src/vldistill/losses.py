"""Distillation objectives: attention MSE, hidden MSE / queue NCE, soft-label CE."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .rng import Rng
from .tokens import TAG, WORD, ConfigError

__all__ = [
    "IncompatibleError",
    "QueueStateError",
    "DistillConfig",
    "SampleQueue",
    "ProjectionParams",
    "token_mask",
    "attention_loss",
    "hidden_mse_loss",
    "nce_hidden_loss",
    "pooled_mse_loss",
    "queue_update",
    "init_queue",
    "classification_loss",
    "mean_pool_tokens",
    "uniform_layer_map",
]

HID_VARIANTS = ("nce_token", "nce_meanpool", "mse_lastlayer", "mse_meanpool", "mse_layerwise")
ATT_SCOPES = ("last_layer", "layerwise")
TOKEN_SCOPES = ("all", "textual_only")


class IncompatibleError(ValueError):
    """Teacher and student tensors cannot be compared (heads or length differ)."""


class QueueStateError(RuntimeError):
    """The sample queue was used before it was filled."""


@dataclass(frozen=True)
class DistillConfig:
    alpha: float = 10.0
    beta: float = 10.0
    tau: float = 1.0
    tau_d: float = 1.0
    hid_variant: str = "nce_token"
    att_scope: str = "last_layer"
    token_scope: str = "all"
    queue_size: int = 4096
    cls_weight: float = 0.0   # fine-tuning soft-label weight
    ce_weight: float = 1.0    # fine-tuning task loss weight
    vlp_weight: float = 1.0   # 0 gives the distillation-only pre-training row

    def __post_init__(self):
        if self.tau <= 0 or self.tau_d <= 0:
            raise ConfigError("tau and tau_d must be positive")
        if self.queue_size < 1:
            raise ConfigError("queue_size must be at least 1")
        if min(self.alpha, self.beta, self.cls_weight, self.ce_weight, self.vlp_weight) < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.hid_variant not in HID_VARIANTS:
            raise ConfigError(f"hid_variant must be one of {HID_VARIANTS}, got {self.hid_variant!r}")
        if self.att_scope not in ATT_SCOPES:
            raise ConfigError(f"att_scope must be one of {ATT_SCOPES}, got {self.att_scope!r}")
        if self.token_scope not in TOKEN_SCOPES:
            raise ConfigError(f"token_scope must be one of {TOKEN_SCOPES}, got {self.token_scope!r}")

    @property
    def uses_queue(self) -> bool:
        return self.beta > 0 and self.hid_variant.startswith("nce")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DistillConfig":
        return cls(**d)

    def with_(self, **kw) -> "DistillConfig":
        return replace(self, **kw)

    @classmethod
    def off(cls, **kw) -> "DistillConfig":
        return cls(**{"alpha": 0.0, "beta": 0.0, **kw})


class SampleQueue:
    """Fixed-capacity FIFO of unit-norm teacher embeddings, pre-filled at creation."""

    def __init__(self, entries: np.ndarray):
        self.entries = np.array(entries, dtype=np.float32)
        self.write_cursor = 0

    @property
    def capacity(self) -> int:
        return self.entries.shape[0]

    @property
    def dim(self) -> int:
        return self.entries.shape[1]

    def snapshot(self) -> np.ndarray:
        """Entries oldest-first."""
        return np.roll(self.entries, -self.write_cursor, axis=0)


def init_queue(K: int, d_T: int, rng: Rng) -> SampleQueue:
    if K < 1:
        raise ConfigError(f"queue capacity must be >= 1, got {K}")
    v = rng.normal((K, d_T))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return SampleQueue(v.astype(np.float32))


def queue_update(queue: SampleQueue, batch_teacher_embeddings) -> None:
    """Overwrite the oldest entries with ``batch`` (rows already l2-normalised)."""
    if queue is None:
        raise QueueStateError("queue is not initialised")
    x = np.asarray(batch_teacher_embeddings, dtype=np.float32)
    n = x.shape[0]
    if n > queue.capacity:
        raise ConfigError(f"cannot enqueue {n} embeddings into a queue of capacity {queue.capacity}")
    if x.shape[1] != queue.dim:
        raise IncompatibleError(f"embedding width {x.shape[1]} != queue width {queue.dim}")
    idx = (queue.write_cursor + np.arange(n)) % queue.capacity
    queue.entries[idx] = x
    queue.write_cursor = int((queue.write_cursor + n) % queue.capacity)


@dataclass
class ProjectionParams:
    W_h: Tensor   # [d_S, d_T], hidden MSE
    phi: Tensor   # [d_S, d_T], NCE mapping

    @classmethod
    def init(cls, d_S: int, d_T: int, rng: Rng) -> "ProjectionParams":
        s = 1.0 / math.sqrt(d_S)
        return cls(
            Tensor(rng.child("W_h").normal((d_S, d_T), scale=s).astype(np.float32), requires_grad=True),
            Tensor(rng.child("phi").normal((d_S, d_T), scale=s).astype(np.float32), requires_grad=True),
        )

    def as_dict(self) -> dict:
        return {"distill.W_h": self.W_h, "distill.phi": self.phi}


def token_mask(pad_mask: np.ndarray, modality: np.ndarray | None, scope: str = "all") -> np.ndarray:
    """Positions that take part in distillation: real tokens, optionally text only."""
    m = np.asarray(pad_mask, dtype=bool)
    if scope == "textual_only":
        if modality is None:
            raise ConfigError("textual_only scope needs modality labels")
        mod = np.asarray(modality)
        m = m & ((mod == WORD) | (mod == TAG))
    elif scope != "all":
        raise ConfigError(f"unknown token scope {scope!r}")
    return m


def attention_loss(A_S: Tensor, A_T, pad_mask: np.ndarray, scope: str = "all",
                   modality: np.ndarray | None = None) -> Tensor:
    """Row-wise attention MSE averaged over valid query tokens and heads.

    Accepts ``[H, T, T]`` or batched ``[B, H, T, T]`` maps. Each row's MSE is
    taken over the valid key columns only; PAD rows and columns never count.
    """
    A_T = A_T.data if isinstance(A_T, Tensor) else np.asarray(A_T)
    if A_S.shape != A_T.shape:
        kind = "head count" if A_S.shape[-3] != A_T.shape[-3] else "token count"
        raise IncompatibleError(f"attention {kind} mismatch: {A_S.shape} vs {A_T.shape}")
    squeeze = A_S.ndim == 3
    if squeeze:
        A_S = A_S.reshape(1, *A_S.shape)
        A_T = A_T[None]
        pad_mask = np.asarray(pad_mask)[None]
        modality = None if modality is None else np.asarray(modality)[None]
    m = token_mask(pad_mask, modality, scope).astype(A_S.dtype)   # [B, T]
    n_cols = m.sum(axis=1)                                         # [B]
    H = A_S.shape[1]
    col = m[:, None, None, :]
    row = m[:, None, :, None]
    # per-row weight: 1 / n_valid_cols; rows normalised by total valid (row, head) pairs
    n_rows = H * m.sum()
    w = (row * col) / np.maximum(n_cols, 1)[:, None, None, None] / max(n_rows, 1.0)
    diff = A_S - A_T
    return (diff * diff * w.astype(A_S.dtype)).sum()


def uniform_layer_map(num_student: int, num_teacher: int) -> list[tuple[int, int]]:
    """Student block l -> teacher block round(l * L_T / L_S), blocks numbered from 1."""
    return [(l, int(round(l * num_teacher / num_student))) for l in range(1, num_student + 1)]


def hidden_mse_loss(H_S: list, H_T: list, W_h: Tensor, pad_mask: np.ndarray,
                    layer_map: list[tuple[int, int]], modality=None, scope: str = "all") -> Tensor:
    """Mean over valid tokens and mapped layers of ``MSE(H_S W_h, H_T)``.

    ``H_S``/``H_T`` are per-layer lists as in a ``ForwardTrace.hidden``
    (``[B, T, d]`` or ``[T, d]`` each).
    """
    if not layer_map:
        raise ConfigError("layer_map is empty")
    for ls, lt in layer_map:
        if not (0 <= ls < len(H_S)) or not (0 <= lt < len(H_T)):
            raise ConfigError(f"layer_map pair ({ls}, {lt}) references a missing layer")
    mask = token_mask(pad_mask, modality, scope)
    total = None
    for ls, lt in layer_map:
        hs, ht = H_S[ls], H_T[lt]
        ht = ht.data if isinstance(ht, Tensor) else np.asarray(ht)
        s = hs[mask]
        t = ht[mask]
        diff = s @ W_h - t
        term = (diff * diff).mean()
        total = term if total is None else total + term
    return total * (1.0 / len(layer_map))


def mean_pool_tokens(H: Tensor, pad_mask: np.ndarray) -> Tensor:
    """Mean over valid positions; ``[T, d] -> [d]`` or ``[B, T, d] -> [B, d]``."""
    m = np.asarray(pad_mask, dtype=bool)
    counts = m.sum(axis=-1)
    if np.any(counts == 0):
        raise ValueError("mean_pool_tokens: input has no valid tokens")
    w = (m / counts[..., None]).astype(H.dtype)
    return (H * w[..., None]).sum(axis=-2)


def pooled_mse_loss(h_S: Tensor, h_T, W_h: Tensor, pad_mask: np.ndarray) -> Tensor:
    """``MSE(meanpool(h_S) W_h, meanpool(h_T))`` averaged over records."""
    t = h_T.data if isinstance(h_T, Tensor) else np.asarray(h_T)
    m = np.asarray(pad_mask, dtype=bool)
    pooled_t = (t * (m / m.sum(-1, keepdims=True))[..., None]).sum(axis=-2)
    diff = mean_pool_tokens(h_S, m) @ W_h - pooled_t.astype(h_S.dtype)
    return (diff * diff).mean()


def nce_hidden_loss(h_S: Tensor, h_T, queue: SampleQueue, phi: Tensor, tau: float,
                    pooling: str = "token", pad_mask: np.ndarray | None = None):
    """Queue-based InfoNCE between mapped student and teacher embeddings.

    With ``pad_mask`` the inputs are ``[B, T, d]``; otherwise they are already
    the valid rows ``[N, d]``. ``pooling="token"`` uses every valid token as an
    anchor, ``"meanpool"`` one mean vector per record (or one overall for 2-D
    input). The positive sits at logit index 0. Returns ``(loss, teacher_keys)``
    where ``teacher_keys`` are the normalised positives to enqueue afterwards.
    """
    if queue is None:
        raise QueueStateError("sample queue not initialised")
    if tau <= 0:
        raise ConfigError("tau must be positive")
    t = h_T.data if isinstance(h_T, Tensor) else np.asarray(h_T)
    if pooling == "token":
        if pad_mask is not None:
            m = np.asarray(pad_mask, dtype=bool)
            s, t = h_S[m], t[m]
        else:
            s = h_S
    elif pooling == "meanpool":
        if pad_mask is not None:
            s = mean_pool_tokens(h_S, pad_mask)
            m = np.asarray(pad_mask, dtype=bool)
            t = (t * (m / m.sum(-1, keepdims=True))[..., None]).sum(axis=-2)
        else:
            s = h_S.mean(axis=0, keepdims=True)
            t = t.mean(axis=0, keepdims=True)
    else:
        raise ConfigError(f"unknown pooling {pooling!r}")
    s = ag.l2_normalize(s @ phi, axis=-1)
    t = t / np.maximum(np.linalg.norm(t, axis=-1, keepdims=True), 1e-12)
    t = t.astype(s.dtype)
    l_pos = (s * t).sum(axis=-1, keepdims=True)                       # [N, 1]
    l_neg = s @ queue.entries.T.astype(s.dtype)                       # [N, K]
    logits = ag.concat([l_pos, l_neg], axis=1) * (1.0 / tau)
    loss = ag.cross_entropy(logits, np.zeros(logits.shape[0], dtype=np.int64))
    return loss, t


def classification_loss(z_S: Tensor, z_T, tau_d: float = 1.0) -> Tensor:
    """Soft cross-entropy ``-sum softmax(z_T/tau_d) * log softmax(z_S/tau_d)``."""
    if tau_d <= 0:
        raise ConfigError("tau_d must be positive")
    zt = z_T.data if isinstance(z_T, Tensor) else np.asarray(z_T)
    if zt.shape != z_S.shape:
        raise IncompatibleError(f"logit shapes differ: {z_S.shape} vs {zt.shape}")
    squeeze = z_S.ndim == 1
    if squeeze:
        z_S = z_S.reshape(1, -1)
        zt = zt[None]
    zt = zt.astype(np.float64) / tau_d
    p = np.exp(zt - zt.max(axis=-1, keepdims=True))
    p /= p.sum(axis=-1, keepdims=True)
    return ag.soft_cross_entropy(z_S * (1.0 / tau_d), p)
