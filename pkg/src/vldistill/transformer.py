"""Post-norm transformer encoder that records every hidden state and attention map."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .rng import Rng

__all__ = [
    "CapacityError",
    "TransformerConfig",
    "ForwardTrace",
    "Transformer",
    "multi_head_attention",
    "transformer_block",
    "NUM_SEGMENTS",
]

NUM_SEGMENTS = 3  # word, tag, visual


class CapacityError(ValueError):
    """Input is longer than the model's position table."""


@dataclass(frozen=True)
class TransformerConfig:
    num_layers: int = 4
    num_heads: int = 4
    hidden_dim: int = 32
    ffn_dim: int = 64
    max_tokens: int = 24
    vocab_size: int = 64
    visual_dim: int = 22
    num_answers: int = 8
    ln_eps: float = 1e-5

    def __post_init__(self):
        for name in ("num_layers", "num_heads", "hidden_dim", "ffn_dim", "max_tokens",
                     "vocab_size", "visual_dim", "num_answers"):
            if getattr(self, name) <= 0:
                raise ValueError(f"TransformerConfig.{name} must be positive")
        if self.hidden_dim % self.num_heads:
            raise ValueError(
                f"hidden_dim {self.hidden_dim} is not divisible by num_heads {self.num_heads}"
            )

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads

    @classmethod
    def teacher(cls, **kw) -> "TransformerConfig":
        return cls(**{**dict(num_layers=4, num_heads=4, hidden_dim=64, ffn_dim=128), **kw})

    @classmethod
    def student(cls, **kw) -> "TransformerConfig":
        return cls(**{**dict(num_layers=4, num_heads=4, hidden_dim=32, ffn_dim=64), **kw})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TransformerConfig":
        return cls(**d)

    def with_(self, **kw) -> "TransformerConfig":
        return replace(self, **kw)


@dataclass
class ForwardTrace:
    hidden: list          # L+1 tensors [B, T, d]; index 0 is the embedding output
    attention: list       # L tensors [B, H, T, T]
    pooled_cls: Tensor    # [B, d]
    pad_mask: np.ndarray  # [B, T] True on real tokens


def _linear(x: Tensor, params: dict, prefix: str) -> Tensor:
    return x @ params[prefix + ".w"] + params[prefix + ".b"]


def multi_head_attention(h_in: Tensor, params: dict, pad_mask: np.ndarray, num_heads: int,
                         prefix: str = "attn"):
    """Scaled dot-product attention over ``num_heads`` heads.

    ``h_in`` is ``[B, T, d]`` (or ``[T, d]``), ``pad_mask`` marks real tokens.
    Returns the projected context and the post-softmax attention ``[B, H, T, T]``.
    PAD keys get exactly zero weight.
    """
    squeeze = h_in.ndim == 2
    if squeeze:
        h_in = h_in.reshape(1, *h_in.shape)
        pad_mask = np.asarray(pad_mask)[None]
    B, T, d = h_in.shape
    dk = d // num_heads

    def heads(t: Tensor) -> Tensor:
        return t.reshape(B, T, num_heads, dk).transpose(0, 2, 1, 3)

    q = heads(_linear(h_in, params, prefix + ".q"))
    k = heads(_linear(h_in, params, prefix + ".k"))
    v = heads(_linear(h_in, params, prefix + ".v"))
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dk))
    key_mask = np.asarray(pad_mask, dtype=bool)[:, None, None, :]
    attn = ag.softmax(scores, axis=-1, mask=key_mask)
    ctx = (attn @ v).transpose(0, 2, 1, 3).reshape(B, T, d)
    out = _linear(ctx, params, prefix + ".o")
    if squeeze:
        return out.reshape(T, d), attn.reshape(num_heads, T, T)
    return out, attn


def transformer_block(h_in: Tensor, params: dict, pad_mask: np.ndarray, num_heads: int,
                      prefix: str = "layer0", eps: float = 1e-5):
    """attention -> add -> norm -> FFN -> add -> norm."""
    p = prefix + "."
    attn_out, attn = multi_head_attention(h_in, params, pad_mask, num_heads, prefix=p + "attn")
    h = ag.layer_norm(h_in + attn_out, params[p + "ln1.g"], params[p + "ln1.b"], eps)
    f = ag.gelu(_linear(h, params, p + "ffn1"))
    f = _linear(f, params, p + "ffn2")
    out = ag.layer_norm(h + f, params[p + "ln2.g"], params[p + "ln2.b"], eps)
    return out, attn


class Transformer:
    """Parameters plus forward pass. Teacher and student differ only in config."""

    def __init__(self, config: TransformerConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    @classmethod
    def init(cls, config: TransformerConfig, rng: Rng) -> "Transformer":
        c = config
        d, f = c.hidden_dim, c.ffn_dim
        params: dict[str, Tensor] = {}

        def dense(name, n_in, n_out):
            w = rng.child(name).normal((n_in, n_out), scale=1.0 / math.sqrt(n_in))
            params[name + ".w"] = Tensor(w.astype(np.float32), requires_grad=True)
            params[name + ".b"] = Tensor(np.zeros(n_out, np.float32), requires_grad=True)

        def norm(name, n):
            params[name + ".g"] = Tensor(np.ones(n, np.float32), requires_grad=True)
            params[name + ".b"] = Tensor(np.zeros(n, np.float32), requires_grad=True)

        def table(name, rows):
            w = rng.child(name).normal((rows, d), scale=0.1)
            params[name] = Tensor(w.astype(np.float32), requires_grad=True)

        table("emb.word", c.vocab_size)
        table("emb.pos", c.max_tokens)
        table("emb.seg", NUM_SEGMENTS)
        dense("emb.vis", c.visual_dim, d)
        norm("emb.ln", d)
        for layer in range(c.num_layers):
            p = f"layer{layer}."
            for m in ("q", "k", "v", "o"):
                dense(p + "attn." + m, d, d)
            norm(p + "ln1", d)
            dense(p + "ffn1", d, f)
            dense(p + "ffn2", f, d)
            norm(p + "ln2", d)
        dense("pool", d, d)
        dense("head.mlm", d, c.vocab_size)
        dense("head.itm", d, 1)
        dense("head.qa", d, c.num_answers)
        return cls(config, params)

    # -- helpers ---------------------------------------------------------
    def named_parameters(self):
        return list(self.params.items())

    def copy(self) -> "Transformer":
        return Transformer(self.config, {
            k: Tensor(v.data.copy(), requires_grad=v.requires_grad) for k, v in self.params.items()
        })

    def astype(self, dtype) -> "Transformer":
        return Transformer(self.config, {k: v.astype(dtype) for k, v in self.params.items()})

    def freeze(self) -> "Transformer":
        for v in self.params.values():
            v.requires_grad = False
            v.grad = None
        return self

    # -- forward -----------------------------------------------------------
    def embed(self, batch) -> Tensor:
        c, p = self.config, self.params
        ids = np.asarray(batch.ids)
        B, T = ids.shape
        if T > c.max_tokens:
            raise CapacityError(f"sequence length {T} exceeds max_tokens {c.max_tokens}")
        dtype = p["emb.word"].dtype
        is_vis = (np.asarray(batch.modality) == 3).astype(dtype)[..., None]
        text = p["emb.word"][ids] * (1.0 - is_vis)
        vis = _linear(Tensor(np.asarray(batch.visual, dtype=dtype)), p, "emb.vis") * is_vis
        x = text + vis + p["emb.pos"][np.arange(T)] + p["emb.seg"][np.asarray(batch.segment)]
        return ag.layer_norm(x, p["emb.ln.g"], p["emb.ln.b"], c.ln_eps)

    def forward(self, batch) -> ForwardTrace:
        c = self.config
        pad_mask = np.asarray(batch.pad_mask, dtype=bool)
        h = self.embed(batch)
        hidden, attention = [h], []
        for layer in range(c.num_layers):
            h, a = transformer_block(h, self.params, pad_mask, c.num_heads,
                                     prefix=f"layer{layer}", eps=c.ln_eps)
            hidden.append(h)
            attention.append(a)
        pooled = ag.tanh(_linear(h[:, 0, :], self.params, "pool"))
        return ForwardTrace(hidden=hidden, attention=attention, pooled_cls=pooled,
                            pad_mask=pad_mask)

    __call__ = forward
