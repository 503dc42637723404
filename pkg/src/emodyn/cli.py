"""``emodyn`` command line: prepare / train / eval / predict / synth."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import statistics
import sys
from collections import Counter
from pathlib import Path
from typing import Any, Sequence

from .corpus import Vocab, build_vocab, collect_labels, load_corpus, read_label_file, serialize_corpus
from .encoder import EncoderConfig
from .metrics import confusion_heat_export
from .models import ModelConfig
from .synth import SynthSpec, generate
from .trainer import TrainConfig, evaluate_model, load_checkpoint, predict_corpus, save_checkpoint, train, write_history

log = logging.getLogger("emodyn")


class CliError(Exception):
    pass


# ---------------------------------------------------------------- config + overrides


def _parse_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def _schema_check(cls, d: dict, where: str) -> None:
    names = {f.name for f in dataclasses.fields(cls)}
    for k in d:
        if k not in names:
            raise CliError(f"unknown config key {where}{k}")


def apply_overrides(cfg: dict, overrides: Sequence[str]) -> dict:
    """Apply ``a.b.c=value`` assignments; values parse as JSON, else stay strings."""
    for ov in overrides:
        if "=" not in ov:
            raise CliError(f"override {ov!r} is not key=value")
        key, raw = ov.split("=", 1)
        parts = key.strip().split(".")
        node = cfg
        for p in parts[:-1]:
            if node.get(p) is None:
                node[p] = {}
            if not isinstance(node[p], dict):
                raise CliError(f"override {key!r}: {p!r} is not a section")
            node = node[p]
        node[parts[-1]] = _parse_value(raw)
    return cfg


def load_run_config(path: str | None, overrides: Sequence[str]) -> tuple[ModelConfig, TrainConfig]:
    cfg: dict = {}
    if path:
        cfg = json.loads(Path(path).read_text(encoding="utf-8"))
    cfg = apply_overrides(cfg, overrides)
    unknown = set(cfg) - {"model", "train"}
    if unknown:
        raise CliError(f"unknown config sections: {sorted(unknown)}")
    model = dict(cfg.get("model", {}))
    _schema_check(ModelConfig, model, "model.")
    for sub in ("encoder", "backbone"):
        if isinstance(model.get(sub), dict):
            _schema_check(EncoderConfig, model[sub], f"model.{sub}.")
    train_d = cfg.get("train", {})
    _schema_check(TrainConfig, train_d, "train.")
    topo = model.get("topology", "st_bert")
    if topo != "st_bert" and "fusion" not in model:
        model["fusion"] = None
    if topo == "h_bert" and model.get("backbone") is None:
        enc = model.get("encoder", {})
        model["backbone"] = {k: enc[k] for k in ("d_model", "n_heads", "d_hidden", "activation") if k in enc}
        model["backbone"].setdefault("max_len", max(16, model.get("K", 4) + 1))
    try:
        return ModelConfig.from_dict(model), TrainConfig.from_dict(train_d)
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid config: {exc}") from None


# ---------------------------------------------------------------- subcommands


def _split_arg(arg: str) -> tuple[str, str]:
    if "=" in arg:
        name, path = arg.split("=", 1)
        return name, path
    return Path(arg).stem, arg


def cmd_prepare(args) -> int:
    splits = [_split_arg(a) for a in args.corpus]
    corpora = {name: load_corpus(path) for name, path in splits}
    first = corpora[splits[0][0]]
    vocab = build_vocab(first, args.vocab_size, not args.cased)
    if args.vocab_out:
        vocab.save(args.vocab_out)
    labels = collect_labels(c for convs in corpora.values() for c in convs)
    header = ["split", "conversations", "utterances", "labelled", "avg_conv_length", *labels]
    rows = ["\t".join(header)]
    for name, convs in corpora.items():
        n_utt = sum(len(c) for c in convs)
        counts = Counter(u.label for c in convs for u in c.utterances if u.label is not None)
        labelled = sum(counts.values())
        row = [name, str(len(convs)), str(n_utt), str(labelled), f"{n_utt / max(len(convs), 1):.2f}"]
        row += [str(counts.get(lab, 0)) for lab in labels]
        rows.append("\t".join(row))
    table = "\n".join(rows) + "\n"
    if args.stats_out:
        Path(args.stats_out).write_text(table, encoding="utf-8")
    sys.stdout.write(table)
    return 0


def _train_once(model_cfg, train_cfg, train_convs, val_convs, vocab, labels, out: Path) -> dict:
    res = train(model_cfg, train_convs, val_convs, train_cfg, vocab=vocab, labels=labels)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "checkpoint", res.model, res.optim, res.labels, train_cfg)
    write_history(res.history, out / "metrics.csv")
    best = res.best
    summary = {"seed": train_cfg.seed, "best_epoch": res.best_epoch, "steps": res.steps, "val_wacc": best.val_wacc, "val_wf1": best.val_wf1}
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    return summary


def cmd_train(args) -> int:
    model_cfg, train_cfg = load_run_config(args.config, args.set)
    if args.seed is not None:
        train_cfg.seed = args.seed
    train_convs = load_corpus(args.train)
    labels = read_label_file(args.labels) if args.labels else None
    if labels is not None:
        load_corpus(args.train, labels)
    val_convs = load_corpus(args.val, labels) if args.val else None
    vocab = Vocab.load(args.vocab, train_cfg.lowercase) if args.vocab else None
    out = Path(args.out)
    summaries = []
    for k in range(args.runs):
        cfg_k = dataclasses.replace(train_cfg, seed=train_cfg.seed + k)
        mcfg = ModelConfig.from_dict(model_cfg.to_dict())
        run_dir = out if args.runs == 1 else out / f"run_{k}"
        summaries.append(_train_once(mcfg, cfg_k, train_convs, val_convs, vocab, labels, run_dir))
        log.info("run %d: %s", k, summaries[-1])
    agg: dict[str, Any] = {"runs": summaries}
    for key in ("val_wacc", "val_wf1"):
        vals = [s[key] for s in summaries if s[key] is not None]
        if vals:
            agg[f"{key}_mean"] = statistics.fmean(vals)
            agg[f"{key}_std"] = statistics.pstdev(vals) if len(vals) > 1 else 0.0
    out.mkdir(parents=True, exist_ok=True)
    if args.runs > 1:
        (out / "summary.json").write_text(json.dumps(agg, indent=2) + "\n", encoding="utf-8")
    if "val_wf1_mean" in agg:
        print(f"val weighted ACC {agg['val_wacc_mean']:.4f} ± {agg['val_wacc_std']:.4f}  "
              f"weighted F1 {agg['val_wf1_mean']:.4f} ± {agg['val_wf1_std']:.4f}  ({args.runs} run(s))")
    else:
        print(f"trained {args.runs} run(s); no validation data")
    return 0


def cmd_eval(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    convs = load_corpus(args.test, ck.labels)
    report = evaluate_model(ck.model, convs, ck.labels)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json() + "\n", encoding="utf-8")
    confusion_heat_export(report, out / "confusion")
    print(report.to_json())
    return 0


def cmd_predict(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    convs = load_corpus(args.corpus, ck.labels)
    preds = predict_corpus(ck.model, convs, ck.labels)
    lines = ["\t".join(["conversation_id", "turn", "gold", "predicted", *(f"p_{lab}" for lab in ck.labels)])]
    for p in preds:
        gold = ck.labels[p.gold] if p.gold is not None else ""
        lines.append("\t".join([p.conv_id, str(p.turn), gold, ck.labels[p.pred], *(f"{float(x):.6f}" for x in p.probs)]))
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


def cmd_synth(args) -> int:
    d: dict = {}
    if args.config:
        d = json.loads(Path(args.config).read_text(encoding="utf-8"))
    d = apply_overrides(d, args.set)
    _schema_check(SynthSpec, d, "")
    try:
        spec = SynthSpec.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid synth spec: {exc}") from None
    text = serialize_corpus(generate(spec, args.n_conversations, args.seed))
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="emodyn", description="Emotion recognition in conversation with BERT-style context models.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="build a vocab and print corpus statistics")
    p.add_argument("corpus", nargs="+", help="corpus file, optionally NAME=PATH; the first one feeds the vocab")
    p.add_argument("--vocab-out")
    p.add_argument("--stats-out")
    p.add_argument("--vocab-size", type=int, default=2000)
    p.add_argument("--cased", action="store_true", help="do not lowercase")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train one or more runs")
    p.add_argument("--config")
    p.add_argument("--train", required=True)
    p.add_argument("--val")
    p.add_argument("--vocab")
    p.add_argument("--labels", help="label file, one label per line (fixes class order)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", "--seed-base", dest="seed", type=int, help="seed of the first run; run k uses seed + k")
    p.add_argument("--runs", type=int, default=1)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a labelled corpus")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--out", default="eval")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="write per-turn predictions as TSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-conversations", type=int, default=100)
    p.add_argument("--out")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.set_defaults(func=cmd_synth)
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    if getattr(args, "runs", 1) < 1:
        print("emodyn: error: --runs must be >= 1", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except (CliError, ValueError, OSError, RuntimeError, KeyError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"emodyn: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
