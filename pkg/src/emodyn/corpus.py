"""Conversation data model, corpus I/O, WordPiece-style tokenizer and context packing."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence, TextIO

from .tensor import ContractError, LabelError

PAD, UNK, CLS, SEP = "[PAD]", "[UNK]", "[CLS]", "[SEP]"
SPECIAL_TOKENS = (PAD, UNK, CLS, SEP)
PAD_ID, UNK_ID, CLS_ID, SEP_ID = 0, 1, 2, 3
CONT = "##"

CONTEXT_KINDS = ("none", "intra", "inter", "conv")


class CorpusParseError(ValueError):
    def __init__(self, lineno: int, msg: str):
        super().__init__(f"line {lineno}: {msg}")
        self.lineno = lineno


@dataclass(frozen=True)
class Utterance:
    index: int  # 1-based turn position
    speaker: int  # 1..n_speakers
    text: str
    label: str | None = None


@dataclass(frozen=True)
class Conversation:
    id: str
    utterances: tuple[Utterance, ...]
    n_speakers: int

    def __len__(self) -> int:
        return len(self.utterances)

    def __getitem__(self, i: int) -> Utterance:
        """1-based access, mirroring turn indices."""
        if not 1 <= i <= len(self.utterances):
            raise ContractError(f"utterance index {i} outside [1, {len(self.utterances)}] in {self.id!r}")
        return self.utterances[i - 1]

    @property
    def speakers(self) -> list[int]:
        return [u.speaker for u in self.utterances]


# ---------------------------------------------------------------- corpus I/O


def _parse_record(obj, lineno: int, labels: Sequence[str] | None) -> Conversation:
    if not isinstance(obj, dict):
        raise CorpusParseError(lineno, "record is not a JSON object")
    for key in ("id", "n_speakers", "turns"):
        if key not in obj:
            raise CorpusParseError(lineno, f"missing field {key!r}")
    cid, n_spk, turns = obj["id"], obj["n_speakers"], obj["turns"]
    if not isinstance(cid, str):
        raise CorpusParseError(lineno, "id must be a string")
    if not isinstance(n_spk, int) or isinstance(n_spk, bool) or n_spk < 1:
        raise CorpusParseError(lineno, "n_speakers must be an integer >= 1")
    if not isinstance(turns, list) or not turns:
        raise CorpusParseError(lineno, "turns must be a nonempty list")
    utts = []
    for k, turn in enumerate(turns, start=1):
        if not isinstance(turn, dict):
            raise CorpusParseError(lineno, f"turn {k} is not an object")
        spk = turn.get("speaker")
        if not isinstance(spk, int) or isinstance(spk, bool) or not 1 <= spk <= n_spk:
            raise CorpusParseError(lineno, f"turn {k}: speaker {spk!r} outside [1, {n_spk}]")
        text = turn.get("text")
        if not isinstance(text, str):
            raise CorpusParseError(lineno, f"turn {k}: text must be a string")
        label = turn.get("label")
        if label is not None and not isinstance(label, str):
            raise CorpusParseError(lineno, f"turn {k}: label must be a string")
        if label is not None and labels is not None and label not in labels:
            raise LabelError(f"line {lineno}: unknown label {label!r}")
        utts.append(Utterance(k, spk, text, label))
    return Conversation(cid, tuple(utts), n_spk)


def parse_corpus(stream: TextIO | Iterable[str], labels: Sequence[str] | None = None) -> list[Conversation]:
    """Parse one-conversation-per-line JSON. Blank lines are skipped.

    With ``labels`` given, any label outside it raises :class:`LabelError`.
    """
    convs = []
    for lineno, line in enumerate(stream, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise CorpusParseError(lineno, f"invalid JSON ({exc.msg})") from None
        convs.append(_parse_record(obj, lineno, labels))
    return convs


def load_corpus(path: str | Path, labels: Sequence[str] | None = None) -> list[Conversation]:
    with open(path, encoding="utf-8") as fh:
        return parse_corpus(fh, labels)


def serialize_conversation(conv: Conversation) -> str:
    turns = []
    for u in conv.utterances:
        t = {"speaker": u.speaker, "text": u.text}
        if u.label is not None:
            t["label"] = u.label
        turns.append(t)
    return json.dumps({"id": conv.id, "n_speakers": conv.n_speakers, "turns": turns}, ensure_ascii=False)


def serialize_corpus(convs: Iterable[Conversation]) -> str:
    return "".join(serialize_conversation(c) + "\n" for c in convs)


def collect_labels(convs: Iterable[Conversation]) -> list[str]:
    """Label set in first-seen order."""
    seen: dict[str, None] = {}
    for c in convs:
        for u in c.utterances:
            if u.label is not None:
                seen.setdefault(u.label, None)
    return list(seen)


def read_label_file(path: str | Path) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        return [ln.rstrip("\n") for ln in fh if ln.strip()]


# ---------------------------------------------------------------- vocabulary / tokenizer


@dataclass
class Vocab:
    tokens: list[str]  # id -> token, specials first
    lowercase: bool = True
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if tuple(self.tokens[:4]) != SPECIAL_TOKENS:
            raise ContractError("vocab must start with [PAD] [UNK] [CLS] [SEP]")
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ContractError("duplicate tokens in vocab")

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, tok: str) -> bool:
        return tok in self.index

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for tok in self.tokens[4:]:
                fh.write(tok + "\n")

    @classmethod
    def load(cls, path: str | Path, lowercase: bool = True) -> "Vocab":
        with open(path, encoding="utf-8") as fh:
            toks = [ln.rstrip("\n") for ln in fh]
        return cls(list(SPECIAL_TOKENS) + toks, lowercase)


def _words(text: str, lowercase: bool) -> list[str]:
    return (text.lower() if lowercase else text).split()


def build_vocab(corpus: Iterable[Conversation], max_size: int, lowercase: bool = True) -> Vocab:
    """Specials, then every character bare and ``##``-prefixed, then words by frequency.

    Ties in frequency break alphabetically so the vocab is deterministic.
    """
    counts: Counter[str] = Counter()
    for conv in corpus:
        for u in conv.utterances:
            counts.update(_words(u.text, lowercase))
    alphabet = sorted({ch for w in counts for ch in w})
    need = 4 + 2 * len(alphabet)
    if max_size < need:
        raise ContractError(f"max_size {max_size} too small: alphabet needs {need} entries")
    tokens = list(SPECIAL_TOKENS) + alphabet + [CONT + ch for ch in alphabet]
    present = set(tokens)
    for word, _ in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0])):
        if len(tokens) >= max_size:
            break
        if word not in present:
            tokens.append(word)
            present.add(word)
    return Vocab(tokens, lowercase)


def wordpiece(word: str, vocab: Vocab) -> list[str]:
    """Greedy longest-match-first split of one word."""
    pieces = []
    start = 0
    while start < len(word):
        end = len(word)
        match = None
        while end > start:
            cand = word[start:end] if start == 0 else CONT + word[start:end]
            if cand in vocab.index:
                match = cand
                break
            end -= 1
        if match is None:
            pieces.append(UNK)
            start += 1
        else:
            pieces.append(match)
            start = end
    return pieces


def tokenize_pieces(text: str, vocab: Vocab) -> list[str]:
    out: list[str] = []
    for w in _words(text, vocab.lowercase):
        out.extend(wordpiece(w, vocab))
    return out


def tokenize(text: str, vocab: Vocab) -> list[int]:
    return [vocab.index[p] for p in tokenize_pieces(text, vocab)]


def detokenize(ids: Sequence[int], vocab: Vocab) -> str:
    words: list[str] = []
    for i in ids:
        tok = vocab.tokens[i]
        if tok.startswith(CONT) and words:
            words[-1] += tok[len(CONT):]
        else:
            words.append(tok)
    return " ".join(words)


# ---------------------------------------------------------------- contexts


def _window(conv: Conversation, i: int, K: int) -> range:
    if not 1 <= i <= len(conv):
        raise ContractError(f"target index {i} outside [1, {len(conv)}] in {conv.id!r}")
    if K < 0:
        raise ContractError(f"window K must be >= 0, got {K}")
    return range(max(i - K, 1), i)


def intra_context(conv: Conversation, i: int, K: int) -> list[Utterance]:
    """Preceding turns in the window spoken by the target's speaker."""
    spk = conv[i].speaker
    return [conv[t] for t in _window(conv, i, K) if conv[t].speaker == spk]


def inter_context(conv: Conversation, i: int, K: int) -> list[Utterance]:
    """Preceding turns in the window spoken by anyone else."""
    spk = conv[i].speaker
    return [conv[t] for t in _window(conv, i, K) if conv[t].speaker != spk]


def conv_context(conv: Conversation, i: int, K: int) -> list[Utterance]:
    return [conv[t] for t in _window(conv, i, K)]


EXTRACTORS = {"intra": intra_context, "inter": inter_context, "conv": conv_context}


def context(conv: Conversation, i: int, K: int, kind: str) -> list[Utterance]:
    if kind == "none":
        _window(conv, i, K)
        return []
    return EXTRACTORS[kind](conv, i, K)


# ---------------------------------------------------------------- packing


@dataclass(frozen=True)
class PackedSequence:
    token_ids: tuple[int, ...]
    segment_ids: tuple[int, ...]
    attention_len: int
    target_meta: tuple[str, int, str]

    def __len__(self) -> int:
        return len(self.token_ids)

    def padded(self, length: int) -> "PackedSequence":
        """Append [PAD] up to ``length``; attention_len is unchanged."""
        extra = length - len(self.token_ids)
        if extra < 0:
            raise ContractError(f"cannot pad length {len(self)} down to {length}")
        return PackedSequence(
            self.token_ids + (PAD_ID,) * extra,
            self.segment_ids + (0,) * extra,
            self.attention_len,
            self.target_meta,
        )


def pack_ids(
    target: Sequence[int],
    context_ids: Sequence[int],
    max_len: int,
    meta: tuple[str, int, str] = ("", 0, "none"),
) -> PackedSequence:
    """[CLS] target [SEP] context [SEP]; context truncated oldest-first, then target tail-truncated."""
    if max_len < 8:
        raise ContractError(f"max_len must be >= 8, got {max_len}")
    target = list(target)
    ctx = list(context_ids)
    room = max_len - 3 - len(target)
    if room <= 0:
        ctx = []
    elif len(ctx) > room:
        ctx = ctx[len(ctx) - room:]
    if not ctx:
        target = target[: max_len - 2]
        toks = [CLS_ID, *target, SEP_ID]
        return PackedSequence(tuple(toks), (0,) * len(toks), len(toks), meta)
    head = [CLS_ID, *target, SEP_ID]
    tail = [*ctx, SEP_ID]
    return PackedSequence(tuple(head + tail), (0,) * len(head) + (1,) * len(tail), len(head) + len(tail), meta)


def pack(
    target: Utterance,
    context_utts: Sequence[Utterance],
    vocab: Vocab,
    max_len: int,
    meta: tuple[str, int, str] | None = None,
    sep_between_context: bool = False,
) -> PackedSequence:
    ctx: list[int] = []
    for k, u in enumerate(context_utts):
        if sep_between_context and k > 0:
            ctx.append(SEP_ID)
        ctx.extend(tokenize(u.text, vocab))
    if meta is None:
        meta = ("", target.index, "none")
    return pack_ids(tokenize(target.text, vocab), ctx, max_len, meta)
