"""Small BERT-style transformer encoder with three output heads.

Heads: masked-character prediction over the vocabulary, a single-class
prediction read from the [CLS] position, and per-token emission scores for
sequence tagging (whose transition matrix also lives here so the whole model
checkpoints as one unit).

Parameter names are stable and checkpoint-facing:
  emb.token, emb.pos, emb.ln.{g,b}
  layer.{i}.attn.{q,k,v,o}.{w,b}, layer.{i}.attn.ln.{g,b}
  layer.{i}.ffn.{w1,b1,w2,b2}, layer.{i}.ffn.ln.{g,b}
  head.mlm.{w,b}, head.cls.{w,b}, head.tok.{w,b}, pooler.{w,b} (optional)
  crf.trans, crf.start, crf.end
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .tensor import Tensor

ATTENTION_MASK_VALUE = -1e9


@dataclass
class EncoderConfig:
    num_layers: int = 2
    hidden: int = 64
    heads: int = 4
    ffn_mult: int = 4
    max_seq_len: int = 32
    vocab_size: int = 64
    num_classes: int = 2
    num_tags: int = 1
    dropout: float = 0.1
    tie_mlm_weights: bool = False
    use_tanh_pooler: bool = False
    init_std: float = 0.02

    def __post_init__(self):
        if self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        if self.hidden % self.heads != 0:
            raise ValueError(f"hidden ({self.hidden}) must be divisible by heads ({self.heads})")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    @property
    def ffn_dim(self) -> int:
        return self.hidden * self.ffn_mult

    def to_dict(self) -> dict:
        return {
            "num_layers": self.num_layers,
            "hidden": self.hidden,
            "heads": self.heads,
            "ffn_mult": self.ffn_mult,
            "max_seq_len": self.max_seq_len,
            "vocab_size": self.vocab_size,
            "num_classes": self.num_classes,
            "num_tags": self.num_tags,
            "dropout": self.dropout,
            "tie_mlm_weights": self.tie_mlm_weights,
            "use_tanh_pooler": self.use_tanh_pooler,
            "init_std": self.init_std,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**d)


def _truncated_normal(rng: np.random.Generator, shape, std: float, dtype) -> np.ndarray:
    """Normal(0, std) with redraws outside two standard deviations."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out.astype(dtype)


class EncoderModel:
    """Transformer encoder parameters plus heads; owns its parameter registry."""

    def __init__(self, config: EncoderConfig, params: "OrderedDict[str, Tensor]", decay_flags: dict):
        self.config = config
        self.params = params
        self.decay_flags = decay_flags

    # -- construction ---------------------------------------------------

    @classmethod
    def init(cls, config: EncoderConfig, seed: int, dtype=np.float32) -> "EncoderModel":
        """Seeded random init: truncated-normal weights, zero biases, unit norms."""
        rng = np.random.default_rng(seed)
        params: OrderedDict[str, Tensor] = OrderedDict()
        decay: dict[str, bool] = {}

        def weight(name, shape):
            params[name] = Tensor(_truncated_normal(rng, shape, config.init_std, dtype), requires_grad=True)
            decay[name] = True

        def bias(name, size):
            params[name] = Tensor(np.zeros(size, dtype=dtype), requires_grad=True)
            decay[name] = False

        def norm(name_prefix, size):
            params[f"{name_prefix}.g"] = Tensor(np.ones(size, dtype=dtype), requires_grad=True)
            params[f"{name_prefix}.b"] = Tensor(np.zeros(size, dtype=dtype), requires_grad=True)
            decay[f"{name_prefix}.g"] = False
            decay[f"{name_prefix}.b"] = False

        h = config.hidden
        weight("emb.token", (config.vocab_size, h))
        weight("emb.pos", (config.max_seq_len, h))
        norm("emb.ln", h)
        for i in range(config.num_layers):
            for proj in ("q", "k", "v", "o"):
                weight(f"layer.{i}.attn.{proj}.w", (h, h))
                bias(f"layer.{i}.attn.{proj}.b", h)
            norm(f"layer.{i}.attn.ln", h)
            weight(f"layer.{i}.ffn.w1", (h, config.ffn_dim))
            bias(f"layer.{i}.ffn.b1", config.ffn_dim)
            weight(f"layer.{i}.ffn.w2", (config.ffn_dim, h))
            bias(f"layer.{i}.ffn.b2", h)
            norm(f"layer.{i}.ffn.ln", h)
        if not config.tie_mlm_weights:
            weight("head.mlm.w", (h, config.vocab_size))
        bias("head.mlm.b", config.vocab_size)
        if config.use_tanh_pooler:
            weight("pooler.w", (h, h))
            bias("pooler.b", h)
        weight("head.cls.w", (h, config.num_classes))
        bias("head.cls.b", config.num_classes)
        weight("head.tok.w", (h, config.num_tags))
        bias("head.tok.b", config.num_tags)
        k = config.num_tags
        params["crf.trans"] = Tensor(np.zeros((k, k), dtype=dtype), requires_grad=True)
        params["crf.start"] = Tensor(np.zeros(k, dtype=dtype), requires_grad=True)
        params["crf.end"] = Tensor(np.zeros(k, dtype=dtype), requires_grad=True)
        decay["crf.trans"] = False
        decay["crf.start"] = False
        decay["crf.end"] = False
        return cls(config, params, decay)

    def named_parameters(self) -> "OrderedDict[str, Tensor]":
        return self.params

    def adam_slots(self) -> list:
        return [(name, p, self.decay_flags[name]) for name, p in self.params.items()]

    def param_count(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def copy(self) -> "EncoderModel":
        params = OrderedDict(
            (name, Tensor(p.data.copy(), requires_grad=True)) for name, p in self.params.items()
        )
        return EncoderModel(self.config, params, dict(self.decay_flags))

    # -- persistence ------------------------------------------------------

    def save(self, path) -> None:
        save_checkpoint(path, self.params)

    @classmethod
    def load(cls, path, config: EncoderConfig) -> "EncoderModel":
        arrays = load_checkpoint(path)
        template = cls.init(config, seed=0)
        if list(arrays) != list(template.params):
            raise ValueError("checkpoint parameter names do not match the configuration")
        params = OrderedDict()
        for name, arr in arrays.items():
            if tuple(arr.shape) != template.params[name].shape:
                raise ValueError(f"checkpoint shape mismatch for {name}")
            params[name] = Tensor(arr, requires_grad=True)
        return cls(config, params, template.decay_flags)

    def load_arrays(self, arrays) -> None:
        for name, arr in arrays.items():
            self.params[name].data = np.array(arr, dtype=self.params[name].data.dtype)

    # -- forward ----------------------------------------------------------

    def forward(
        self,
        input_ids: np.ndarray,
        attention_mask: np.ndarray,
        training: bool = False,
        rng: Optional[np.random.Generator] = None,
        attn_probs_out: Optional[list] = None,
    ) -> Tensor:
        """Encode a [B, S] id batch into [B, S, hidden] states.

        Padded key positions receive a large negative additive before the
        attention softmax, so their content cannot influence real positions.
        """
        cfg = self.config
        input_ids = np.asarray(input_ids)
        attention_mask = np.asarray(attention_mask)
        batch, seq = input_ids.shape
        if seq > cfg.max_seq_len:
            raise ValueError(f"sequence length {seq} exceeds max_seq_len {cfg.max_seq_len}")
        p = self.params
        dtype = p["emb.token"].data.dtype
        drop = cfg.dropout if training else 0.0

        x = T.embedding_lookup(p["emb.token"], input_ids)
        x = T.add(x, p["emb.pos"][:seq])
        x = T.layer_norm(x, p["emb.ln.g"], p["emb.ln.b"])
        x = T.dropout(x, drop, training, rng)

        # additive mask: 0 on real keys, a large negative on padding
        mask_add = ((1.0 - attention_mask.astype(dtype)) * ATTENTION_MASK_VALUE).reshape(batch, 1, 1, seq)
        nh, hd = cfg.heads, cfg.head_dim
        scale = 1.0 / math.sqrt(hd)

        def split_heads(t):
            return T.transpose(T.reshape(t, (batch, seq, nh, hd)), (0, 2, 1, 3))

        for i in range(cfg.num_layers):
            pre = f"layer.{i}"
            q = split_heads(T.add(T.matmul(x, p[f"{pre}.attn.q.w"]), p[f"{pre}.attn.q.b"]))
            k = split_heads(T.add(T.matmul(x, p[f"{pre}.attn.k.w"]), p[f"{pre}.attn.k.b"]))
            v = split_heads(T.add(T.matmul(x, p[f"{pre}.attn.v.w"]), p[f"{pre}.attn.v.b"]))
            scores = T.add(T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), scale), Tensor(mask_add))
            probs = T.softmax(scores, axis=-1)
            if attn_probs_out is not None:
                attn_probs_out.append(probs.numpy().copy())
            probs = T.dropout(probs, drop, training, rng)
            ctx = T.reshape(T.transpose(T.matmul(probs, v), (0, 2, 1, 3)), (batch, seq, cfg.hidden))
            attn_out = T.add(T.matmul(ctx, p[f"{pre}.attn.o.w"]), p[f"{pre}.attn.o.b"])
            attn_out = T.dropout(attn_out, drop, training, rng)
            x = T.layer_norm(T.add(x, attn_out), p[f"{pre}.attn.ln.g"], p[f"{pre}.attn.ln.b"])

            ffn = T.gelu(T.add(T.matmul(x, p[f"{pre}.ffn.w1"]), p[f"{pre}.ffn.b1"]))
            ffn = T.add(T.matmul(ffn, p[f"{pre}.ffn.w2"]), p[f"{pre}.ffn.b2"])
            ffn = T.dropout(ffn, drop, training, rng)
            x = T.layer_norm(T.add(x, ffn), p[f"{pre}.ffn.ln.g"], p[f"{pre}.ffn.ln.b"])
        return x

    # -- heads --------------------------------------------------------------

    def cls_logits(self, hidden_states: Tensor) -> Tensor:
        """Class scores from the [CLS] (position 0) hidden state."""
        self._check_hidden(hidden_states)
        cls_vec = hidden_states[:, 0, :]
        if self.config.use_tanh_pooler:
            cls_vec = T.tanh(T.add(T.matmul(cls_vec, self.params["pooler.w"]), self.params["pooler.b"]))
        return T.add(T.matmul(cls_vec, self.params["head.cls.w"]), self.params["head.cls.b"])

    def token_logits(self, hidden_states: Tensor) -> Tensor:
        """Per-token emission scores [B, S, num_tags]."""
        self._check_hidden(hidden_states)
        return T.add(T.matmul(hidden_states, self.params["head.tok.w"]), self.params["head.tok.b"])

    def mlm_logits(self, hidden_states: Tensor) -> Tensor:
        """Per-token vocabulary scores [B, S, vocab]."""
        self._check_hidden(hidden_states)
        if self.config.tie_mlm_weights:
            w = T.transpose(self.params["emb.token"], (1, 0))
        else:
            w = self.params["head.mlm.w"]
        return T.add(T.matmul(hidden_states, w), self.params["head.mlm.b"])

    def crf_params(self):
        from .objectives import CrfParams

        return CrfParams(
            transitions=self.params["crf.trans"],
            start_scores=self.params["crf.start"],
            end_scores=self.params["crf.end"],
        )

    def _check_hidden(self, hidden_states: Tensor):
        if hidden_states.shape[-1] != self.config.hidden:
            raise ValueError(
                f"hidden states width {hidden_states.shape[-1]} does not match "
                f"configured hidden {self.config.hidden}"
            )
