"""F-BERT, H-BERT and ST-BERT topologies with the discriminator head.

All three map (conversation, turn index) to a representation built only from
that turn and its preceding window, then to emotion logits.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import Any

import numpy as np

from . import tensor as T
from .corpus import Conversation, PackedSequence, Vocab, context, pack_ids, tokenize, SEP_ID
from .encoder import Encoder, EncoderConfig, trunc_normal
from .tensor import ContractError, Tensor

TOPOLOGIES = ("f_bert", "h_bert", "st_bert")
FUSIONS = ("concat", "gate", "attention")
ST_CONTEXTS = ("both", "intra", "inter")


@dataclass
class ModelConfig:
    topology: str = "st_bert"
    fusion: str | None = "gate"
    K: int = 4
    share_st_encoders: bool = True
    st_contexts: str = "both"  # ablation: drop one ST-BERT branch
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    backbone: EncoderConfig | None = None
    disc_hidden: int | None = None  # defaults to the discriminator input width
    strict_bias: bool = False  # zero and freeze the discriminator biases
    detach_context_branches: bool = False
    sep_between_context: bool = False

    def __post_init__(self):
        if isinstance(self.encoder, dict):
            self.encoder = EncoderConfig(**self.encoder)
        if isinstance(self.backbone, dict):
            self.backbone = EncoderConfig(**self.backbone)
        if self.topology not in TOPOLOGIES:
            raise ContractError(f"unknown topology {self.topology!r}")
        if (self.fusion is not None) != (self.topology == "st_bert"):
            raise ContractError("fusion must be set iff topology is st_bert")
        if self.fusion is not None and self.fusion not in FUSIONS:
            raise ContractError(f"unknown fusion {self.fusion!r}")
        if (self.backbone is not None) != (self.topology == "h_bert"):
            raise ContractError("backbone must be set iff topology is h_bert")
        if self.st_contexts not in ST_CONTEXTS:
            raise ContractError(f"unknown st_contexts {self.st_contexts!r}")
        if self.st_contexts != "both" and self.topology != "st_bert":
            raise ContractError("st_contexts ablation only applies to st_bert")
        if self.K < 0:
            raise ContractError("K must be >= 0")
        if self.backbone is not None:
            if self.backbone.d_model != self.encoder.d_model:
                raise ContractError("backbone d_model must equal encoder d_model")
            if self.backbone.max_len < self.K + 1:
                raise ContractError(f"backbone max_len {self.backbone.max_len} < window K+1 = {self.K + 1}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ContractError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------- small helpers


def linear(x: Tensor, w: Tensor, b: Tensor | None) -> Tensor:
    """w @ x + b for a 1-D x and w stored as (out, in)."""
    if x.ndim != 1 or w.shape[1] != x.shape[0]:
        raise ContractError(f"linear: weight {w.shape} does not accept input {x.shape}")
    y = T.reshape(T.matmul(T.reshape(x, (1, -1)), T.transpose(w)), (w.shape[0],))
    return y if b is None else T.add_bias_row(y, b)


def fuse_concat(f_intra: Tensor, f_inter: Tensor, p: dict[str, Tensor]) -> Tensor:
    return linear(T.concat_last_axis(f_intra, f_inter), p["w_c"], p["b_c"])


def _h_projections(f_intra: Tensor, f_inter: Tensor, p: dict[str, Tensor]) -> tuple[Tensor, Tensor]:
    return T.tanh(linear(f_intra, p["w_intra"], p["b_intra"])), T.tanh(linear(f_inter, p["w_inter"], p["b_inter"]))


def _mix(weight: Tensor, h_intra: Tensor, h_inter: Tensor) -> Tensor:
    return T.add(T.hadamard(weight, h_intra), T.hadamard(T.one_minus(weight), h_inter))


def fuse_gate(f_intra: Tensor, f_inter: Tensor, p: dict[str, Tensor]) -> Tensor:
    """Neuron-wise gate z in (0,1)^d: r = z*h_intra + (1-z)*h_inter."""
    h_intra, h_inter = _h_projections(f_intra, f_inter, p)
    z = T.sigmoid(linear(T.concat_last_axis(f_intra, f_inter), p["w_z"], p["b_z"]))
    return _mix(z, h_intra, h_inter)


def attention_weight(f_intra: Tensor, f_inter: Tensor) -> Tensor:
    """Scalar sigmoid(f_intra . f_inter / sqrt(d_model))."""
    return T.sigmoid(T.scale(T.dot(f_intra, f_inter), 1.0 / math.sqrt(f_intra.shape[0])))


def fuse_attention(f_intra: Tensor, f_inter: Tensor, p: dict[str, Tensor]) -> Tensor:
    h_intra, h_inter = _h_projections(f_intra, f_inter, p)
    alpha = attention_weight(f_intra, f_inter)
    return T.add(T.scalar_mul(alpha, h_intra), T.scalar_mul(T.one_minus(alpha), h_inter))


FUSE = {"concat": fuse_concat, "gate": fuse_gate, "attention": fuse_attention}


def fuse_single(kind: str, f: Tensor, branch: str, p: dict[str, Tensor]) -> Tensor:
    """Fusion with the other branch's contribution zeroed.

    concat sees a zero block in place of the dropped feature; gate and
    attention pin their weight to 1 (intra kept) or 0 (inter kept).
    """
    if kind == "concat":
        zero = Tensor(np.zeros(f.shape))
        pair = (f, zero) if branch == "intra" else (zero, f)
        return fuse_concat(*pair, p)
    key = "intra" if branch == "intra" else "inter"
    return T.tanh(linear(f, p[f"w_{key}"], p[f"b_{key}"]))


def discriminate(r: Tensor, p: dict[str, Tensor]) -> tuple[Tensor, np.ndarray, int]:
    """tanh hidden layer, then logits. Returns (logits, probs, argmax with lowest-index ties)."""
    if r.ndim != 1 or p["w_o"].shape[1] != r.shape[0]:
        raise ContractError(f"discriminator expects input width {p['w_o'].shape[1]}, got {r.shape}")
    o = T.tanh(linear(r, p["w_o"], p["b_o"]))
    logits = linear(o, p["w_p"], p["b_p"])
    z = logits.data - logits.data.max()
    probs = np.exp(z) / np.exp(z).sum()
    return logits, probs, int(np.argmax(logits.data))


# ---------------------------------------------------------------- the model


class EmotionModel:
    """Holds every parameter for one topology and the vocab used for packing."""

    def __init__(self, cfg: ModelConfig, n_classes: int, vocab: Vocab, seed: int = 0):
        if n_classes < 1:
            raise ContractError("need at least one class")
        if cfg.encoder.vocab_size != len(vocab):
            raise ContractError(f"encoder vocab_size {cfg.encoder.vocab_size} != vocab length {len(vocab)}")
        self.cfg = cfg
        self.n_classes = n_classes
        self.vocab = vocab
        self._tok_cache: dict[str, tuple[int, ...]] = {}
        rng = np.random.default_rng(seed)
        d = cfg.encoder.d_model
        dh = cfg.encoder.d_hidden

        self.encoder = Encoder(cfg.encoder, rng)
        self.encoder_inter = None
        if cfg.topology == "st_bert" and not cfg.share_st_encoders:
            self.encoder_inter = Encoder(cfg.encoder, rng)
        self.backbone = Encoder(cfg.backbone, rng, token_embeddings=False) if cfg.topology == "h_bert" else None

        self.fusion: dict[str, Tensor] = {}
        if cfg.topology == "st_bert":
            shapes = {"concat": {"w_c": (dh, 2 * d), "b_c": (dh,)}}
            proj = {"w_intra": (dh, d), "b_intra": (dh,), "w_inter": (dh, d), "b_inter": (dh,)}
            shapes["gate"] = {**proj, "w_z": (dh, 2 * d), "b_z": (dh,)}
            shapes["attention"] = dict(proj)
            for name, shape in shapes[cfg.fusion].items():
                arr = np.zeros(shape) if name.startswith("b_") else trunc_normal(rng, shape)
                self.fusion[name] = Tensor(arr, requires_grad=True, name=f"fusion.{name}")

        d_in = dh if cfg.topology == "st_bert" else d
        d_out = cfg.disc_hidden or d_in
        self.disc = {
            "w_o": Tensor(trunc_normal(rng, (d_out, d_in)), requires_grad=True, name="disc.w_o"),
            "b_o": Tensor(np.zeros(d_out), requires_grad=not cfg.strict_bias, name="disc.b_o"),
            "w_p": Tensor(trunc_normal(rng, (n_classes, d_out)), requires_grad=True, name="disc.w_p"),
            "b_p": Tensor(np.zeros(n_classes), requires_grad=not cfg.strict_bias, name="disc.b_p"),
        }

    # ------------------------------------------------------------ parameters

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        out.update({f"encoder.{k}": v for k, v in self.encoder.params.items()})
        if self.encoder_inter is not None:
            out.update({f"encoder_inter.{k}": v for k, v in self.encoder_inter.params.items()})
        if self.backbone is not None:
            out.update({f"backbone.{k}": v for k, v in self.backbone.params.items()})
        out.update({f"fusion.{k}": v for k, v in self.fusion.items()})
        out.update({f"disc.{k}": v for k, v in self.disc.items()})
        return out

    def frozen(self) -> set[str]:
        return {"disc.b_o", "disc.b_p"} if self.cfg.strict_bias else set()

    @staticmethod
    def decays(name: str) -> bool:
        """Weight decay skips LayerNorm parameters and biases."""
        leaf = name.rsplit(".", 1)[-1]
        return not (leaf.startswith("b_") or leaf in ("gamma", "beta"))

    def set_dropout_rng(self, rng: np.random.Generator | None) -> None:
        for enc in (self.encoder, self.encoder_inter, self.backbone):
            if enc is not None:
                enc.dropout_rng = rng

    # ------------------------------------------------------------ packing

    def token_ids(self, text: str) -> tuple[int, ...]:
        ids = self._tok_cache.get(text)
        if ids is None:
            ids = tuple(tokenize(text, self.vocab))
            self._tok_cache[text] = ids
        return ids

    def packed(self, conv: Conversation, i: int, kind: str) -> PackedSequence:
        """Pack turn i with its ``kind`` context ('none', 'intra', 'inter', 'conv')."""
        ctx: list[int] = []
        for k, u in enumerate(context(conv, i, self.cfg.K, kind)):
            if self.cfg.sep_between_context and k > 0:
                ctx.append(SEP_ID)
            ctx.extend(self.token_ids(u.text))
        return pack_ids(self.token_ids(conv[i].text), ctx, self.cfg.encoder.max_len, (conv.id, i, kind))

    # ------------------------------------------------------------ representations

    def representation(self, conv: Conversation, i: int) -> Tensor:
        topo = self.cfg.topology
        if topo == "f_bert":
            return f_bert_repr(self, conv, i)
        if topo == "h_bert":
            return h_bert_repr(self, conv, i)
        return st_bert_repr(self, conv, i)

    def forward(self, conv: Conversation, i: int) -> tuple[Tensor, np.ndarray, int]:
        return discriminate(self.representation(conv, i), self.disc)

    def logits(self, conv: Conversation, i: int) -> Tensor:
        return self.forward(conv, i)[0]

    def loss(self, conv: Conversation, i: int, target: int) -> Tensor:
        return T.cross_entropy(self.logits(conv, i), target)


def f_bert_repr(model: EmotionModel, conv: Conversation, i: int) -> Tensor:
    return model.encoder.encode_cls(model.packed(conv, i, "conv"))


def h_bert_repr(model: EmotionModel, conv: Conversation, i: int) -> Tensor:
    """Branch features for the window [max(i-K,1), i], target last, through the backbone."""
    feats = []
    for tau in window_positions(i, model.cfg.K):
        seq = model.packed(conv, tau, "intra")
        if tau < i and model.cfg.detach_context_branches:
            with T.no_grad():
                feats.append(model.encoder.encode_cls(seq))
        else:
            feats.append(model.encoder.encode_cls(seq))
    return model.backbone.backbone_encode(feats)


def window_positions(i: int, K: int) -> list[int]:
    return list(range(max(i - K, 1), i + 1))


def st_bert_repr(model: EmotionModel, conv: Conversation, i: int) -> Tensor:
    cfg = model.cfg
    inter_enc = model.encoder_inter or model.encoder
    if cfg.st_contexts == "intra":
        return fuse_single(cfg.fusion, model.encoder.encode_cls(model.packed(conv, i, "intra")), "intra", model.fusion)
    if cfg.st_contexts == "inter":
        return fuse_single(cfg.fusion, inter_enc.encode_cls(model.packed(conv, i, "inter")), "inter", model.fusion)
    f_intra = model.encoder.encode_cls(model.packed(conv, i, "intra"))
    f_inter = inter_enc.encode_cls(model.packed(conv, i, "inter"))
    return FUSE[cfg.fusion](f_intra, f_inter, model.fusion)
