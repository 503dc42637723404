"""Miniature BERT-style encoder built on :mod:`emodyn.tensor`.

Post-LN Transformer blocks: ``y = LN(x + MHA(x))``, ``out = LN(y + FFN(y))``
with a RELU feed-forward by default. The same class serves as the H-BERT
backbone when built without token/segment tables.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

from . import tensor as T
from .corpus import CLS_ID, PackedSequence
from .tensor import ContractError, Tensor

MASK_VALUE = -1e9


@dataclass
class EncoderConfig:
    vocab_size: int = 0
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    d_hidden: int = 256
    max_len: int = 128
    n_segments: int = 2
    activation: str = "relu"
    ln_eps: float = 1e-12
    dropout: float = 0.0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ContractError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.activation not in ("relu", "gelu"):
            raise ContractError(f"unknown activation {self.activation!r}")
        if self.n_layers < 1 or self.max_len < 1:
            raise ContractError("n_layers and max_len must be positive")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) resampled outside +-2 std."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


@lru_cache(maxsize=512)
def _key_mask(n_heads: int, n: int, valid: int) -> np.ndarray:
    m = np.zeros((n_heads, n, n))
    m[:, :, valid:] = MASK_VALUE
    m.setflags(write=False)
    return m


class Encoder:
    """Parameters live in ``self.params`` keyed by dotted name."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator, token_embeddings: bool = True):
        self.cfg = cfg
        self.token_embeddings = token_embeddings
        self.dropout_rng: np.random.Generator | None = None
        d, dh = cfg.d_model, cfg.d_hidden
        p: dict[str, Tensor] = {}

        def new(name, arr):
            p[name] = Tensor(arr, requires_grad=True, name=name)

        if token_embeddings:
            if cfg.vocab_size < 5:
                raise ContractError("token embeddings need vocab_size >= 5")
            new("tok_emb", trunc_normal(rng, (cfg.vocab_size, d)))
            new("seg_emb", trunc_normal(rng, (cfg.n_segments, d)))
        new("pos_emb", trunc_normal(rng, (cfg.max_len, d)))
        new("emb_ln.gamma", np.ones(d))
        new("emb_ln.beta", np.zeros(d))
        for i in range(cfg.n_layers):
            pre = f"layers.{i}."
            for w in ("w_q", "w_k", "w_v", "w_o"):
                new(pre + w, trunc_normal(rng, (d, d)))
            new(pre + "attn_ln.gamma", np.ones(d))
            new(pre + "attn_ln.beta", np.zeros(d))
            new(pre + "w_1", trunc_normal(rng, (d, dh)))
            new(pre + "b_1", np.zeros(dh))
            new(pre + "w_2", trunc_normal(rng, (dh, d)))
            new(pre + "b_2", np.zeros(d))
            new(pre + "ffn_ln.gamma", np.ones(d))
            new(pre + "ffn_ln.beta", np.zeros(d))
        self.params = p
        self._layers = []
        for i in range(cfg.n_layers):
            pre = f"layers.{i}."
            self._layers.append({k[len(pre):]: v for k, v in p.items() if k.startswith(pre)})

    def layer(self, i: int) -> dict[str, Tensor]:
        return self._layers[i]

    def _ln(self, x: Tensor, prefix: str) -> Tensor:
        p = self.params
        return T.layer_norm(x, p[prefix + ".gamma"], p[prefix + ".beta"], self.cfg.ln_eps)

    def _drop(self, x: Tensor) -> Tensor:
        return T.dropout(x, self.cfg.dropout, self.dropout_rng)

    # ------------------------------------------------------------ embedding layer

    def embed(self, seq: PackedSequence) -> Tensor:
        if not self.token_embeddings:
            raise ContractError("this encoder has no token embeddings (backbone)")
        n = len(seq.token_ids)
        if n > self.cfg.max_len:
            raise ContractError(f"sequence length {n} exceeds max_len {self.cfg.max_len}")
        p = self.params
        x = T.embedding(p["tok_emb"], seq.token_ids)
        x = T.add(x, T.embedding(p["pos_emb"], range(n)))
        x = T.add(x, T.embedding(p["seg_emb"], seq.segment_ids))
        return self._drop(self._ln(x, "emb_ln"))

    # ------------------------------------------------------------ sublayers

    def attention(self, x: Tensor, i: int, valid: int, return_weights: bool = False):
        """Bidirectional multi-head self-attention over the first ``valid`` key positions."""
        n, d = x.shape
        if valid < 1:
            raise ContractError("attention over an all-pad sequence")
        H, dk = self.cfg.n_heads, self.cfg.d_head
        lp = self.layer(i)

        def heads(w):
            return T.transpose(T.reshape(T.matmul(x, lp[w]), (n, H, dk)), (1, 0, 2))

        q, k, v = heads("w_q"), heads("w_k"), heads("w_v")
        scores = T.scale(T.matmul(q, T.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(dk))
        if valid < n:
            scores = T.add_const(scores, _key_mask(H, n, valid))
        weights = T.softmax(scores)
        ctx = T.matmul(self._drop(weights), v)
        out = T.matmul(T.reshape(T.transpose(ctx, (1, 0, 2)), (n, d)), lp["w_o"])
        return (out, weights) if return_weights else out

    def feed_forward(self, x: Tensor, i: int) -> Tensor:
        lp = self.layer(i)
        act = T.relu if self.cfg.activation == "relu" else T.gelu
        h = act(T.add_bias_row(T.matmul(x, lp["w_1"]), lp["b_1"]))
        return T.add_bias_row(T.matmul(h, lp["w_2"]), lp["b_2"])

    def block(self, x: Tensor, i: int, valid: int) -> Tensor:
        pre = f"layers.{i}."
        y = self._ln(T.add(x, self._drop(self.attention(x, i, valid))), pre + "attn_ln")
        return self._ln(T.add(y, self._drop(self.feed_forward(y, i))), pre + "ffn_ln")

    # ------------------------------------------------------------ full passes

    def encode(self, seq: PackedSequence) -> Tensor:
        x = self.embed(seq)
        for i in range(self.cfg.n_layers):
            x = self.block(x, i, seq.attention_len)
        return x

    def encode_cls(self, seq: PackedSequence) -> Tensor:
        """Final-layer hidden state at [CLS] (row 0)."""
        if not seq.token_ids or seq.token_ids[0] != CLS_ID:
            raise ContractError("packed sequence must start with [CLS]")
        return T.take_row(self.encode(seq), 0)

    def backbone_encode(self, features: Sequence[Tensor], n_pad: int = 0) -> Tensor:
        """Run over pre-embedded features; return the final row at the last real position.

        ``n_pad`` appends masked zero rows (used to check pad invariance).
        """
        if not features:
            raise ContractError("backbone_encode needs at least one feature")
        n = len(features)
        total = n + n_pad
        if total > self.cfg.max_len:
            raise ContractError(f"window of {total} exceeds backbone max_len {self.cfg.max_len}")
        rows = list(features) + [Tensor(np.zeros(self.cfg.d_model)) for _ in range(n_pad)]
        x = T.add(T.stack_rows(rows), T.embedding(self.params["pos_emb"], range(total)))
        x = self._drop(self._ln(x, "emb_ln"))
        for i in range(self.cfg.n_layers):
            x = self.block(x, i, n)
        return T.take_row(x, n - 1)
