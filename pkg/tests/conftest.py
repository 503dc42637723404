import numpy as np
import pytest

from emodyn.corpus import Conversation, Utterance, build_vocab
from emodyn.encoder import EncoderConfig
from emodyn.models import EmotionModel, ModelConfig

WORDS = "calm joy grim fury sky rain tea walk news late".split()


def random_conversation(rng, L, S, cid="c", labels=("a", "b", "c")):
    utts = []
    for k in range(1, L + 1):
        text = " ".join(WORDS[j] for j in rng.integers(0, len(WORDS), rng.integers(1, 5)))
        utts.append(Utterance(k, int(rng.integers(1, S + 1)), text, labels[int(rng.integers(len(labels)))]))
    return Conversation(cid, tuple(utts), S)


def tiny_vocab():
    conv = Conversation("v", (Utterance(1, 1, " ".join(WORDS)),), 1)
    return build_vocab([conv], 200)


def tiny_config(topology="st_bert", fusion="gate", K=3, d=8, **kw):
    enc = EncoderConfig(vocab_size=len(tiny_vocab()), d_model=d, n_heads=2, n_layers=1, d_hidden=12, max_len=48)
    backbone = None
    if topology == "h_bert":
        backbone = EncoderConfig(d_model=d, n_heads=2, n_layers=1, d_hidden=12, max_len=K + 1)
    if topology != "st_bert":
        fusion = None
    return ModelConfig(topology=topology, fusion=fusion, K=K, encoder=enc, backbone=backbone, **kw)


def tiny_model(topology="st_bert", fusion="gate", K=3, n_classes=3, seed=0, scale=None, **kw):
    model = EmotionModel(tiny_config(topology, fusion, K, **kw), n_classes, tiny_vocab(), seed)
    if scale is not None:
        # spread weights beyond the 0.02 init so finite differences see real curvature
        rng = np.random.default_rng(seed + 1000)
        for p in model.parameters().values():
            if p.requires_grad:
                p.data = p.data + rng.uniform(-scale, scale, p.shape)
    return model


ALL_TOPOLOGIES = [
    ("f_bert", None),
    ("h_bert", None),
    ("st_bert", "concat"),
    ("st_bert", "gate"),
    ("st_bert", "attention"),
]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, repeated at the end of the pytest run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
