import json
from pathlib import Path

import pytest

from emodyn.cli import apply_overrides, load_run_config, main
from emodyn.synth import SynthSpec

SYNTH = ["--set", "min_turns=3", "--set", "max_turns=4", "--set", "min_words=2", "--set", "max_words=3"]
MODEL = {
    "model": {
        "topology": "st_bert",
        "fusion": "gate",
        "K": 2,
        "encoder": {"d_model": 8, "n_heads": 2, "n_layers": 1, "d_hidden": 12, "max_len": 32},
    },
    "train": {"epochs": 1, "batch_size": 2, "vocab_size": 200},
}


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def corpora(tmp_path, capsys):
    paths = {}
    for name, seed, n in (("train", 0, 6), ("val", 1, 3)):
        p = tmp_path / f"{name}.jsonl"
        assert run(capsys, "synth", "--seed", seed, "--n-conversations", n, "--out", p, *SYNTH)[0] == 0
        paths[name] = p
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps(MODEL))
    paths["config"] = cfg
    return paths


def test_overrides_parse_json_values():
    cfg = apply_overrides({}, ["model.K=3", "model.fusion=concat", "train.lr=0.01", "model.strict_bias=true"])
    assert cfg == {"model": {"K": 3, "fusion": "concat", "strict_bias": True}, "train": {"lr": 0.01}}


def test_run_config_defaults_and_h_bert_backbone():
    m, t = load_run_config(None, ["model.topology=h_bert", "model.K=5", "model.encoder.d_model=16", "model.encoder.n_heads=2"])
    assert m.fusion is None and m.backbone.d_model == 16 and m.backbone.max_len >= 6
    assert t.epochs == 10


def test_synth_is_byte_identical(tmp_path, capsys):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    for p in (a, b):
        assert run(capsys, "synth", "--seed", 7, "--n-conversations", 5, "--out", p, "--set", "label_rate=0.5")[0] == 0
    assert a.read_bytes() == b.read_bytes()
    code, out, _ = run(capsys, "synth", "--seed", 7, "--n-conversations", 5, "--set", "label_rate=0.5")
    assert out == a.read_text()


def test_prepare_statistics(corpora, tmp_path, capsys):
    code, out, _ = run(capsys, "prepare", f"train={corpora['train']}", f"val={corpora['val']}",
                       "--vocab-out", tmp_path / "v.txt", "--stats-out", tmp_path / "s.tsv")
    assert code == 0
    lines = out.splitlines()
    assert lines[0].split("\t")[:5] == ["split", "conversations", "utterances", "labelled", "avg_conv_length"]
    assert [ln.split("\t")[0] for ln in lines[1:]] == ["train", "val"]
    assert lines[1].split("\t")[1] == "6"
    assert (tmp_path / "s.tsv").read_text() == out
    assert (tmp_path / "v.txt").stat().st_size > 0


def test_train_eval_predict_round(corpora, tmp_path, capsys):
    out = tmp_path / "run"
    code, stdout, _ = run(capsys, "train", "--config", corpora["config"], "--train", corpora["train"],
                          "--val", corpora["val"], "--out", out, "--set", "model.K=1")
    assert code == 0 and "weighted F1" in stdout
    assert (out / "checkpoint" / "manifest.json").exists()
    assert json.loads((out / "checkpoint" / "manifest.json").read_text())["model_config"]["K"] == 1
    assert (out / "metrics.csv").read_text().startswith("epoch,train_loss,val_wacc,val_wf1,lr\n")
    summary = json.loads((out / "summary.json").read_text())
    assert summary["best_epoch"] == 1

    code, stdout, _ = run(capsys, "eval", "--checkpoint", out / "checkpoint", "--test", corpora["val"], "--out", tmp_path / "ev")
    assert code == 0
    report = json.loads((tmp_path / "ev" / "report.json").read_text())
    assert report["weighted_f1"] == pytest.approx(summary["val_wf1"], abs=0)
    assert (tmp_path / "ev" / "confusion.csv").exists() and (tmp_path / "ev" / "confusion.svg").exists()

    code, stdout, _ = run(capsys, "predict", "--checkpoint", out / "checkpoint", "--corpus", corpora["val"])
    rows = [ln.split("\t") for ln in stdout.splitlines()]
    labels = json.loads((out / "checkpoint" / "manifest.json").read_text())["labels"]
    assert rows[0] == ["conversation_id", "turn", "gold", "predicted", *(f"p_{lab}" for lab in labels)]
    assert all(abs(sum(float(x) for x in r[4:]) - 1.0) < 1e-5 for r in rows[1:])
    code2, stdout2, _ = run(capsys, "predict", "--checkpoint", out / "checkpoint", "--corpus", corpora["val"])
    assert stdout2 == stdout


def test_predict_accepts_unlabelled_turns(corpora, tmp_path, capsys):
    out = tmp_path / "run"
    assert run(capsys, "train", "--config", corpora["config"], "--train", corpora["train"], "--val", corpora["val"], "--out", out)[0] == 0
    unl = tmp_path / "unl.jsonl"
    run(capsys, "synth", "--seed", 3, "--n-conversations", 2, "--out", unl, *SYNTH, "--set", "label_rate=0.0")
    code, stdout, _ = run(capsys, "predict", "--checkpoint", out / "checkpoint", "--corpus", unl, "--out", tmp_path / "p.tsv")
    rows = (tmp_path / "p.tsv").read_text().splitlines()[1:]
    assert code == 0 and rows and all(r.split("\t")[2] == "" for r in rows)


def test_training_is_idempotent(corpora, tmp_path, capsys):
    dirs = [tmp_path / "a", tmp_path / "b"]
    for d in dirs:
        assert run(capsys, "train", "--config", corpora["config"], "--train", corpora["train"], "--val", corpora["val"], "--out", d)[0] == 0
    for f in sorted((dirs[0] / "checkpoint" / "params").iterdir()):
        assert f.read_bytes() == (dirs[1] / "checkpoint" / "params" / f.name).read_bytes()
    assert (dirs[0] / "metrics.csv").read_bytes() == (dirs[1] / "metrics.csv").read_bytes()


def test_multiple_runs_aggregate(corpora, tmp_path, capsys):
    out = tmp_path / "multi"
    code, stdout, _ = run(capsys, "train", "--config", corpora["config"], "--train", corpora["train"],
                          "--val", corpora["val"], "--out", out, "--runs", 2, "--seed-base", 10)
    assert code == 0 and "±" in stdout and "(2 run(s))" in stdout
    agg = json.loads((out / "summary.json").read_text())
    assert [r["seed"] for r in agg["runs"]] == [10, 11]
    assert {"val_wf1_mean", "val_wf1_std", "val_wacc_mean", "val_wacc_std"} <= set(agg)
    assert (out / "run_0" / "checkpoint").is_dir() and (out / "run_1" / "checkpoint").is_dir()


@pytest.mark.parametrize(
    "argv",
    [
        ["train", "--train", "missing.jsonl", "--out", "x"],
        ["train", "--train", "{train}", "--out", "{tmp}/x", "--set", "model.depth=3"],
        ["train", "--train", "{train}", "--out", "{tmp}/x", "--set", "model.fusion=sum"],
        ["train", "--train", "{train}", "--out", "{tmp}/x", "--runs", "0"],
        ["eval", "--checkpoint", "{tmp}/nothing", "--test", "{train}"],
        ["synth", "--set", "inertia=2"],
        ["synth", "--set", "colour=blue"],
        ["prepare", "{tmp}/absent.jsonl"],
    ],
    ids=["missing-file", "unknown-key", "bad-fusion", "zero-runs", "no-checkpoint", "bad-prob", "unknown-synth-key", "prepare-missing"],
)
def test_errors_exit_nonzero_with_one_line(argv, corpora, tmp_path, capsys):
    argv = [a.format(train=corpora["train"], tmp=tmp_path) for a in argv]
    code, _, err = run(capsys, *argv)
    assert code == 1
    assert err.startswith("emodyn: error: ") and err.count("\n") == 1


def test_corrupt_corpus_reports_line(tmp_path, capsys):
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"id": "a", "n_speakers": 1, "turns": [{"speaker": 0, "text": "x"}]}\n')
    code, _, err = run(capsys, "prepare", bad)
    assert code == 1 and "line 1" in err


def test_shipped_configs_load():
    root = Path(__file__).resolve().parents[1] / "configs"
    topologies = set()
    for path in sorted(root.glob("*bert*.json")):
        model, _ = load_run_config(str(path), [])
        topologies.add(model.topology)
    assert topologies == {"f_bert", "h_bert", "st_bert"}
    SynthSpec.from_dict(json.loads((root / "synth_context_only.json").read_text()))
