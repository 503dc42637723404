"""Desk-scale experiments on synthetic corpora: overfit sanity and context ablation.

Shared by ``scripts/`` and the acceptance tests so both run the same setup.
"""

from __future__ import annotations

import dataclasses
import logging
import statistics
import time

import numpy as np
from dataclasses import dataclass
from typing import Sequence

from . import tensor as T
from .corpus import Conversation, Utterance, build_vocab
from .encoder import EncoderConfig
from .models import EmotionModel, ModelConfig
from .synth import SynthSpec, generate
from .trainer import TrainConfig, evaluate_model, predict_corpus, train

log = logging.getLogger(__name__)

TOPOLOGIES = (
    ("f_bert", None),
    ("h_bert", None),
    ("st_bert", "concat"),
    ("st_bert", "gate"),
    ("st_bert", "attention"),
)


def desk_model(topology: str, fusion: str | None, K: int, encoder: EncoderConfig, **kw) -> ModelConfig:
    backbone = None
    if topology == "h_bert":
        backbone = EncoderConfig(d_model=encoder.d_model, n_heads=encoder.n_heads, n_layers=encoder.n_layers,
                                 d_hidden=encoder.d_hidden, max_len=K + 1)
    return ModelConfig(topology=topology, fusion=fusion if topology == "st_bert" else None, K=K,
                       encoder=dataclasses.replace(encoder), backbone=backbone, **kw)


def training_accuracy(model, convs, labels) -> float:
    preds = predict_corpus(model, convs, labels, labelled_only=True)
    return sum(p.pred == p.gold for p in preds) / len(preds)


# ---------------------------------------------------------------- gradient check

GRADCHECK_CONVERSATION = Conversation(
    "toy",
    (
        Utterance(1, 1, "so calm", "neutral"),
        Utterance(2, 2, "no no so late", "angry"),
        Utterance(3, 1, "oh no", "sad"),
    ),
    2,
)


def gradcheck_all(h: float = 1e-5, seed: int = 0, perturb: float = 0.3) -> dict[str, float]:
    """Worst central-difference relative error over all parameters, per topology."""
    conv = GRADCHECK_CONVERSATION
    vocab = build_vocab([conv], 200)
    enc = EncoderConfig(vocab_size=len(vocab), d_model=8, n_heads=2, n_layers=2, d_hidden=16, max_len=16)
    worst = {}
    for topology, fusion in TOPOLOGIES:
        model = EmotionModel(desk_model(topology, fusion, 2, enc), 3, vocab, seed)
        rng = np.random.default_rng(seed)
        params = [p for p in model.parameters().values() if p.requires_grad]
        for p in params:
            # away from the near-zero init the check sees curvature, not a near-linear map
            p.data = p.data + rng.uniform(-perturb, perturb, p.shape)
        errs = T.check_gradients(lambda: model.loss(conv, len(conv), 2), params, h)
        worst[topology if fusion is None else f"{topology}-{fusion}"] = max(errs.values())
    return worst


# ---------------------------------------------------------------- overfit


@dataclass
class OverfitResult:
    name: str
    epochs: int
    train_accuracy: float
    seconds: float


OVERFIT_SPEC = SynthSpec()  # full label signal on every turn
OVERFIT_ENCODER = EncoderConfig(d_model=64, n_heads=4, n_layers=2, d_hidden=256, max_len=128)


def overfit(topology: str, fusion: str | None, n_conversations: int = 50, max_epochs: int = 200,
            target: float = 0.95, seed: int = 1, K: int = 3) -> OverfitResult:
    """Train until training accuracy reaches ``target`` or ``max_epochs`` pass."""
    convs = generate(OVERFIT_SPEC, n_conversations, seed)
    cfg = desk_model(topology, fusion, K, OVERFIT_ENCODER)
    tcfg = TrainConfig(epochs=max_epochs, batch_size=4, seed=seed, lr=1e-3)
    labels = list(OVERFIT_SPEC.labels)
    accs: list[float] = []

    def check(epoch, model):
        accs.append(training_accuracy(model, convs, labels))
        log.info("overfit %s epoch %d train acc %.3f", topology, epoch, accs[-1])
        return accs[-1] >= target

    t0 = time.perf_counter()
    train(cfg, convs, [], tcfg, labels=labels, on_epoch_end=check)
    name = topology if fusion is None else f"{topology}-{fusion}"
    return OverfitResult(name, len(accs), accs[-1], time.perf_counter() - t0)


# ---------------------------------------------------------------- context ablation

ABLATION_SPEC = SynthSpec(
    n_speakers=2,
    min_turns=8,
    max_turns=8,
    inertia=0.6,
    influence=0.6,
    target_signal=0.0,  # labelled turns say nothing about their label
    context_signal=1.0,
    label_rate=0.5,
    min_words=2,
    max_words=4,
)
ABLATION_ENCODER = EncoderConfig(d_model=32, n_heads=2, n_layers=1, d_hidden=64, max_len=64)
ABLATION_VARIANTS = ("target", "intra", "inter", "both")


@dataclass
class AblationSetup:
    n_train: int = 400
    n_val: int = 60
    n_test: int = 150
    K: int = 3
    fusion: str = "gate"
    train: TrainConfig = dataclasses.field(
        default_factory=lambda: TrainConfig(epochs=15, batch_size=4, lr=5e-4, vocab_size=500)
    )


def ablation_model(variant: str, setup: AblationSetup) -> ModelConfig:
    if variant == "target":
        return desk_model("f_bert", None, 0, ABLATION_ENCODER)
    return desk_model("st_bert", setup.fusion, setup.K, ABLATION_ENCODER, st_contexts=variant)


def ablation_seed(seed: int, setup: AblationSetup | None = None, variants: Sequence[str] = ABLATION_VARIANTS) -> dict[str, float]:
    """Test weighted F1 of each variant on one seed's train/val/test draw."""
    setup = setup or AblationSetup()
    tr = generate(ABLATION_SPEC, setup.n_train, 1000 + seed)
    va = generate(ABLATION_SPEC, setup.n_val, 2000 + seed)
    te = generate(ABLATION_SPEC, setup.n_test, 3000 + seed)
    labels = list(ABLATION_SPEC.labels)
    out = {}
    for v in variants:
        t0 = time.perf_counter()
        res = train(ablation_model(v, setup), tr, va, dataclasses.replace(setup.train, seed=seed), labels=labels)
        out[v] = evaluate_model(res.model, te, labels).weighted_f1
        log.info("ablation seed %d %s: test wF1 %.4f (%.0fs)", seed, v, out[v], time.perf_counter() - t0)
    return out


def summarize(per_seed: Sequence[dict[str, float]]) -> dict[str, tuple[float, float]]:
    """Mean and population std per variant."""
    keys = per_seed[0].keys()
    return {k: (statistics.fmean(r[k] for r in per_seed), statistics.pstdev([r[k] for r in per_seed])) for k in keys}


def ablation_gaps(means: dict[str, float]) -> dict[str, float]:
    """The four orderings the ablation is expected to show, as signed gaps."""
    return {
        "intra - target": means["intra"] - means["target"],
        "inter - target": means["inter"] - means["target"],
        "both - intra": means["both"] - means["intra"],
        "both - inter": means["both"] - means["inter"],
    }

