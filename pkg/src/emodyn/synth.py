"""Synthetic conversations with planted emotion dynamics.

At each turn the speaker keeps their own previous label with probability
``inertia``; failing that, adopts the label of the most recent turn by
another speaker with probability ``influence``; otherwise draws a label
uniformly. Turn text mixes words from a per-label lexicon (with probability
equal to the signal strength) and shared filler words.

With ``label_rate < 1`` only some turns are emitted with labels. Labelled
turns use ``target_signal`` and unlabelled turns use ``context_signal``, so
``target_signal=0`` yields targets whose text says nothing about their label.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Any

import numpy as np

from .corpus import Conversation, Utterance
from .tensor import ContractError

_ONSETS = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"]
_VOWELS = ["a", "e", "i", "o", "u"]


@dataclass
class SynthSpec:
    n_speakers: int = 2
    min_turns: int = 6
    max_turns: int = 10
    labels: tuple[str, ...] = ("neutral", "happy", "sad", "angry")
    inertia: float = 0.6
    influence: float = 0.6
    target_signal: float = 1.0
    context_signal: float = 1.0
    label_rate: float = 1.0
    min_words: int = 4
    max_words: int = 7
    lexicon_size: int = 4
    filler_size: int = 40
    lexicon_seed: int = 0  # fixed so corpora drawn with different seeds share words

    def __post_init__(self):
        self.labels = tuple(self.labels)
        for name in ("inertia", "influence", "target_signal", "context_signal", "label_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ContractError(f"{name} must lie in [0, 1], got {v}")
        if self.n_speakers < 1 or not 1 <= self.min_turns <= self.max_turns:
            raise ContractError("need n_speakers >= 1 and 1 <= min_turns <= max_turns")
        if not 1 <= self.min_words <= self.max_words:
            raise ContractError("need 1 <= min_words <= max_words")
        if len(set(self.labels)) != len(self.labels) or not self.labels:
            raise ContractError("labels must be distinct and nonempty")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["labels"] = list(self.labels)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "SynthSpec":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ContractError(f"unknown synth keys: {sorted(unknown)}")
        return cls(**d)


def make_lexicons(spec: SynthSpec) -> tuple[dict[str, list[str]], list[str]]:
    """Distinct pseudo-words: one lexicon per label plus a shared filler list."""
    rng = np.random.default_rng(spec.lexicon_seed)
    need = len(spec.labels) * spec.lexicon_size + spec.filler_size
    words: list[str] = []
    seen: set[str] = set()
    while len(words) < need:
        n_syl = int(rng.integers(2, 4))
        w = "".join(_ONSETS[rng.integers(len(_ONSETS))] + _VOWELS[rng.integers(len(_VOWELS))] for _ in range(n_syl))
        if w not in seen:
            seen.add(w)
            words.append(w)
    lex = {}
    for k, lab in enumerate(spec.labels):
        lex[lab] = words[k * spec.lexicon_size:(k + 1) * spec.lexicon_size]
    return lex, words[len(spec.labels) * spec.lexicon_size:]


def _text(rng: np.random.Generator, lexicon: list[str], filler: list[str], signal: float, spec: SynthSpec) -> str:
    n = int(rng.integers(spec.min_words, spec.max_words + 1))
    out = []
    for _ in range(n):
        pool = lexicon if rng.random() < signal else filler
        out.append(pool[rng.integers(len(pool))])
    return " ".join(out)


def label_dynamics(rng: np.random.Generator, speakers: list[int], spec: SynthSpec) -> list[int]:
    """Class index per turn under the inertia/influence rule."""
    C = len(spec.labels)
    last_own: dict[int, int] = {}
    labels: list[int] = []
    for t, s in enumerate(speakers):
        other = next((labels[j] for j in range(t - 1, -1, -1) if speakers[j] != s), None)
        if s in last_own and rng.random() < spec.inertia:
            y = last_own[s]
        elif other is not None and rng.random() < spec.influence:
            y = other
        else:
            y = int(rng.integers(C))
        labels.append(y)
        last_own[s] = y
    return labels


def generate(spec: SynthSpec, n_conversations: int, seed: int) -> list[Conversation]:
    if n_conversations < 1:
        raise ContractError("n_conversations must be >= 1")
    rng = np.random.default_rng(seed)
    lex, filler = make_lexicons(spec)
    convs = []
    for k in range(n_conversations):
        L = int(rng.integers(spec.min_turns, spec.max_turns + 1))
        speakers = [int(rng.integers(1, spec.n_speakers + 1)) for _ in range(L)]
        ys = label_dynamics(rng, speakers, spec)
        utts = []
        for t, (s, y) in enumerate(zip(speakers, ys), start=1):
            lab = spec.labels[y]
            labelled = spec.label_rate >= 1.0 or rng.random() < spec.label_rate
            signal = spec.target_signal if labelled else spec.context_signal
            utts.append(Utterance(t, s, _text(rng, lex[lab], filler, signal, spec), lab if labelled else None))
        convs.append(Conversation(f"synth-{seed}-{k:05d}", tuple(utts), spec.n_speakers))
    return convs
