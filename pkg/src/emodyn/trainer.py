"""AdamW with linear decay, the epoch loop, evaluation helpers and checkpoints."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from . import tensor as T
from .corpus import Conversation, Vocab, build_vocab, collect_labels
from .metrics import EvalReport, evaluate
from .models import EmotionModel, ModelConfig
from .tensor import ContractError, LabelError, Tensor

log = logging.getLogger(__name__)

FORMAT_VERSION = 1


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 1
    seed: int = 0
    patience: int | None = None  # epochs without val-F1 improvement before stopping
    grad_clip: float | None = None
    val_fraction: float = 0.1  # used only when no validation corpus is given
    vocab_size: int = 2000
    lowercase: bool = True
    lr: float = 1e-3  # 6e-6 is the fine-tuning value for pretrained weights
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    warmup_steps: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ContractError("epochs and batch_size must be >= 1")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ContractError("val_fraction must be in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ContractError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------- optimizer


@dataclass
class OptimState:
    total_steps: int
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    warmup_steps: int = 0
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def from_config(cls, cfg: TrainConfig, total_steps: int) -> "OptimState":
        return cls(total_steps, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay, cfg.warmup_steps)

    def lr_at(self, t: int) -> float:
        """Linear warmup to lr, then linear decay to 0 at total_steps."""
        if t < self.warmup_steps:
            return self.lr * t / self.warmup_steps
        span = self.total_steps - self.warmup_steps
        if span <= 0:
            return 0.0
        return self.lr * max(0.0, 1.0 - (t - self.warmup_steps) / span)


def adamw_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: OptimState,
    decay: Callable[[str], bool] = lambda name: True,
) -> float:
    """One decoupled-weight-decay Adam update, in place. Returns the learning rate used."""
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise TrainingError(f"non-finite gradient in parameter {name!r}")
    lr = state.lr_at(state.t)
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, g in grads.items():
        p = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        wd = state.weight_decay if decay(name) else 0.0
        step = (m / c1) / (np.sqrt(v / c2) + state.eps)
        # shrink first so a zero gradient gives exactly theta * (1 - lr * wd)
        p.data = p.data * (1.0 - lr * wd) - lr * step
    return lr


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if norm > max_norm:
        s = max_norm / (norm + 1e-12)
        for k in grads:
            grads[k] = grads[k] * s
    return norm


# ---------------------------------------------------------------- examples / evaluation


Example = tuple[Conversation, int, int]  # (conversation, turn index, class id)


def labelled_examples(convs: Sequence[Conversation], labels: Sequence[str]) -> list[Example]:
    index = {lab: k for k, lab in enumerate(labels)}
    out = []
    for c in convs:
        for u in c.utterances:
            if u.label is None:
                continue
            if u.label not in index:
                raise LabelError(f"label {u.label!r} in {c.id!r} not in label set {list(labels)}")
            out.append((c, u.index, index[u.label]))
    return out


def eval_workers() -> int:
    try:
        return max(1, int(os.environ.get("EMODYN_THREADS", "1")))
    except ValueError:
        return 1


@dataclass
class Prediction:
    conv_id: str
    turn: int
    gold: int | None
    pred: int
    probs: np.ndarray


def predict_corpus(model: EmotionModel, convs: Sequence[Conversation], labels: Sequence[str], labelled_only: bool = False) -> list[Prediction]:
    """Predict every turn; read-only on parameters so conversations fan out across threads."""
    index = {lab: k for k, lab in enumerate(labels)}

    def one(conv: Conversation) -> list[Prediction]:
        rows = []
        with T.no_grad():
            for u in conv.utterances:
                if labelled_only and u.label is None:
                    continue
                _, probs, pred = model.forward(conv, u.index)
                gold = index[u.label] if u.label is not None else None
                rows.append(Prediction(conv.id, u.index, gold, pred, probs))
        return rows

    workers = eval_workers()
    if workers > 1 and len(convs) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(one, convs))
    else:
        chunks = [one(c) for c in convs]
    return [p for chunk in chunks for p in chunk]


def evaluate_model(model: EmotionModel, convs: Sequence[Conversation], labels: Sequence[str]) -> EvalReport:
    preds = predict_corpus(model, convs, labels, labelled_only=True)
    if not preds:
        raise ContractError("no labelled turns to evaluate")
    return evaluate([p.gold for p in preds], [p.pred for p in preds], labels)


def params_digest(model: EmotionModel) -> str:
    h = hashlib.sha256()
    for name, p in model.parameters().items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------- training loop


@dataclass
class HistoryRow:
    epoch: int
    train_loss: float
    val_wacc: float | None
    val_wf1: float | None
    lr: float


@dataclass
class TrainResult:
    model: EmotionModel
    optim: OptimState
    labels: list[str]
    history: list[HistoryRow]
    best_epoch: int
    steps: int
    model_cfg: ModelConfig
    train_cfg: TrainConfig

    @property
    def best(self) -> HistoryRow:
        return self.history[self.best_epoch - 1]


def split_validation(convs: Sequence[Conversation], fraction: float, seed: int) -> tuple[list, list]:
    convs = list(convs)
    n_val = int(round(len(convs) * fraction))
    if n_val == 0 or n_val >= len(convs):
        return convs, []
    order = np.random.default_rng(seed).permutation(len(convs))
    val_ids = set(order[:n_val].tolist())
    return [c for k, c in enumerate(convs) if k not in val_ids], [c for k, c in enumerate(convs) if k in val_ids]


def build_model(model_cfg: ModelConfig, vocab: Vocab, n_classes: int, seed: int) -> EmotionModel:
    if model_cfg.encoder.vocab_size != len(vocab):
        model_cfg.encoder.vocab_size = len(vocab)
    return EmotionModel(model_cfg, n_classes, vocab, seed)


def train(
    model_cfg: ModelConfig,
    train_corpus: Sequence[Conversation],
    val_corpus: Sequence[Conversation] | None,
    train_cfg: TrainConfig,
    vocab: Vocab | None = None,
    labels: Sequence[str] | None = None,
    on_epoch_end: Callable[[int, EmotionModel], bool] | None = None,
) -> TrainResult:
    """Per-epoch shuffled training; keeps the parameters of the best validation-F1 epoch.

    ``on_epoch_end`` may return True to stop early (after the epoch is recorded).
    """
    if not train_corpus:
        raise ContractError("training corpus is empty")
    train_corpus = list(train_corpus)
    if val_corpus is None:
        train_corpus, val_corpus = split_validation(train_corpus, train_cfg.val_fraction, train_cfg.seed)
    labels = list(labels) if labels is not None else collect_labels(train_corpus)
    if not labels:
        raise ContractError("training corpus has no labelled turns")
    if vocab is None:
        vocab = build_vocab(train_corpus, train_cfg.vocab_size, train_cfg.lowercase)
    examples = labelled_examples(train_corpus, labels)
    if not examples:
        raise ContractError("training corpus has no labelled turns")
    if val_corpus and not labelled_examples(val_corpus, labels):
        val_corpus = []

    model = build_model(model_cfg, vocab, len(labels), train_cfg.seed)
    params = model.parameters()
    trainable = [n for n, p in params.items() if n not in model.frozen()]
    steps_per_epoch = math.ceil(len(examples) / train_cfg.batch_size)
    state = OptimState.from_config(train_cfg, train_cfg.epochs * steps_per_epoch)
    order_rng = np.random.default_rng(train_cfg.seed)
    model.set_dropout_rng(np.random.default_rng(train_cfg.seed + 1))

    history: list[HistoryRow] = []
    best_f1, best_epoch, best_snapshot, stale = -1.0, 0, None, 0
    lr = state.lr_at(0)
    for epoch in range(1, train_cfg.epochs + 1):
        perm = order_rng.permutation(len(examples))
        total_loss = 0.0
        for start in range(0, len(perm), train_cfg.batch_size):
            batch = [examples[k] for k in perm[start:start + train_cfg.batch_size]]
            for p in params.values():
                p.grad = None
            for conv, i, y in batch:
                loss = T.scale(model.loss(conv, i, y), 1.0 / len(batch))
                T.backward(loss)
                total_loss += loss.item() * len(batch)
            grads = {n: params[n].grad for n in trainable if params[n].grad is not None}
            if train_cfg.grad_clip is not None:
                clip_grad_norm(grads, train_cfg.grad_clip)
            lr = adamw_step(params, grads, state, model.decays)
        train_loss = total_loss / len(examples)
        if val_corpus:
            rep = evaluate_model(model, val_corpus, labels)
            row = HistoryRow(epoch, train_loss, rep.weighted_acc, rep.weighted_f1, lr)
            score = rep.weighted_f1
        else:
            row = HistoryRow(epoch, train_loss, None, None, lr)
            score = float(epoch)  # nothing to select on: keep the latest
        history.append(row)
        log.info("epoch %d loss %.4f val_wf1 %s lr %.2e", epoch, train_loss, row.val_wf1, lr)
        if score > best_f1:
            best_f1, best_epoch, stale = score, epoch, 0
            best_snapshot = {n: p.data.copy() for n, p in params.items()}
        else:
            stale += 1
        if on_epoch_end is not None and on_epoch_end(epoch, model):
            break
        if train_cfg.patience is not None and stale >= train_cfg.patience:
            break
    for n, p in params.items():
        p.data = best_snapshot[n]
        p.grad = None
    return TrainResult(model, state, labels, history, best_epoch, state.t, model_cfg, train_cfg)


def write_history(history: Sequence[HistoryRow], path: str | Path) -> None:
    def fmt(v):
        return "" if v is None else repr(float(v))

    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("epoch,train_loss,val_wacc,val_wf1,lr\n")
        for r in history:
            fh.write(f"{r.epoch},{fmt(r.train_loss)},{fmt(r.val_wacc)},{fmt(r.val_wf1)},{fmt(r.lr)}\n")


# ---------------------------------------------------------------- checkpoints


def _write_array(path: Path, arr: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_array(path: Path, shape: Sequence[int], name: str) -> np.ndarray:
    if not path.exists():
        raise CheckpointError(f"missing array for {name!r} at {path}")
    raw = path.read_bytes()
    n = int(np.prod(shape)) if shape else 1
    if len(raw) != 8 * n:
        raise CheckpointError(f"array {name!r} holds {len(raw) // 8} values, shape {list(shape)} needs {n}")
    return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)


@dataclass
class Checkpoint:
    model: EmotionModel
    optim: OptimState | None
    labels: list[str]
    model_cfg: ModelConfig
    train_cfg: TrainConfig | None


def save_checkpoint(
    path: str | Path,
    model: EmotionModel,
    optim: OptimState | None,
    labels: Sequence[str],
    train_cfg: TrainConfig | None = None,
) -> None:
    """Directory layout: manifest.json, vocab.txt, params/<name>.f64, optim/{m,v}/<name>.f64."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    params = model.parameters()
    manifest = {
        "format_version": FORMAT_VERSION,
        "model_config": model.cfg.to_dict(),
        "train_config": train_cfg.to_dict() if train_cfg else None,
        "labels": list(labels),
        "lowercase": model.vocab.lowercase,
        "params": {n: list(p.shape) for n, p in params.items()},
        "optim": None,
    }
    for n, p in params.items():
        _write_array(root / "params" / f"{n}.f64", p.data)
    if optim is not None:
        manifest["optim"] = {k: getattr(optim, k) for k in ("total_steps", "lr", "beta1", "beta2", "eps", "weight_decay", "warmup_steps", "t")}
        manifest["optim"]["moments"] = sorted(optim.m)
        for n in optim.m:
            _write_array(root / "optim" / "m" / f"{n}.f64", optim.m[n])
            _write_array(root / "optim" / "v" / f"{n}.f64", optim.v[n])
    model.vocab.save(root / "vocab.txt")
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")


def load_checkpoint(path: str | Path) -> Checkpoint:
    root = Path(path)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise CheckpointError(f"no manifest.json in {root}")
    manifest = json.loads(mpath.read_text(encoding="utf-8"))
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"format_version {manifest.get('format_version')!r} unsupported (expected {FORMAT_VERSION})")
    model_cfg = ModelConfig.from_dict(manifest["model_config"])
    train_cfg = TrainConfig.from_dict(manifest["train_config"]) if manifest.get("train_config") else None
    vocab = Vocab.load(root / "vocab.txt", manifest.get("lowercase", True))
    labels = manifest["labels"]
    model = EmotionModel(model_cfg, len(labels), vocab, seed=0)
    params = model.parameters()
    recorded = manifest["params"]
    if set(recorded) != set(params):
        missing = sorted(set(params) - set(recorded)) or sorted(set(recorded) - set(params))
        raise CheckpointError(f"parameter set mismatch, e.g. {missing[0]!r}")
    for n, p in params.items():
        if list(p.shape) != list(recorded[n]):
            raise CheckpointError(f"parameter {n!r}: manifest shape {recorded[n]} != config shape {list(p.shape)}")
        p.data = _read_array(root / "params" / f"{n}.f64", p.shape, n)
    optim = None
    if manifest.get("optim"):
        o = manifest["optim"]
        optim = OptimState(o["total_steps"], o["lr"], o["beta1"], o["beta2"], o["eps"], o["weight_decay"], o["warmup_steps"], o["t"])
        for n in o["moments"]:
            if n not in params:
                raise CheckpointError(f"optimizer moment for unknown parameter {n!r}")
            optim.m[n] = _read_array(root / "optim" / "m" / f"{n}.f64", params[n].shape, f"m:{n}")
            optim.v[n] = _read_array(root / "optim" / "v" / f"{n}.f64", params[n].shape, f"v:{n}")
    return Checkpoint(model, optim, labels, model_cfg, train_cfg)
