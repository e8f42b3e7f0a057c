import json

import pytest

from spnseq import cli, data


@pytest.fixture
def splits(tmp_path):
    full = data.synth_task(0, 24, 4, 3, 3)
    paths = {}
    for name, idx in (("train", range(16)), ("dev", range(16, 20)), ("test", range(20, 24))):
        paths[name] = tmp_path / f"{name}.jsonl"
        data.save_jsonl(full.subset(idx), paths[name])
    return paths


def run(*argv):
    return cli.main([str(a) for a in argv])


def test_train_eval_predict(tmp_path, splits, capsys):
    out = tmp_path / "run"
    assert run("train", "--train", splits["train"], "--dev", splits["dev"], "--test", splits["test"],
               "--epochs", 2, "--out", out) == 0
    report = json.loads((out / "report.json").read_text())
    assert len(report["objective"]) == 2 and "test_error" in report
    assert run("eval", "--checkpoint", out / "model.json", "--data", splits["test"],
               "--out", tmp_path / "eval.json") == 0
    ev = json.loads((tmp_path / "eval.json").read_text())
    assert ev["error_rate"] == pytest.approx(report["test_error"])
    assert run("predict", "--checkpoint", out / "model.json", "--data", splits["test"],
               "--out", tmp_path / "pred.txt", "--marginals", tmp_path / "marg.jsonl") == 0
    lines = (tmp_path / "pred.txt").read_text().splitlines()
    assert len(lines) == 4 and all(len(line.split()) == 4 for line in lines)
    assert len((tmp_path / "marg.jsonl").read_text().splitlines()) == 4


@pytest.mark.parametrize("flags", [
    ["--model", "spn-memm", "--order", "2", "--beam-width", "3"],
    ["--model", "spn-ho-crf", "--semiring", "max"],
    ["--model", "spn-crf", "--window", "3", "--no-sparse-ngrams", "--ngrams", "1,2"],
])
def test_model_variants_train(tmp_path, splits, flags):
    assert run("train", "--train", splits["train"], "--dev", splits["dev"], "--epochs", 1,
               "--out", tmp_path / "m", *flags) == 0


def test_toml_config_and_override(tmp_path, splits):
    cfg = tmp_path / "run.toml"
    cfg.write_text(f'[model]\nmodel = "spn-crf"\nlayers = 1\n[training]\nepochs = 3\nlr = 0.01\n'
                   f'[data]\ntrain = "{splits["train"]}"\n')
    assert run("train", "--config", cfg, "--epochs", 1, "--out", tmp_path / "c") == 0
    report = json.loads((tmp_path / "c" / "report.json").read_text())
    assert len(report["objective"]) == 1
    bad = tmp_path / "bad.toml"
    bad.write_text("colour = 1\n")
    assert run("train", "--config", bad, "--out", tmp_path / "b") == 2


def test_grid_search(tmp_path, splits, capsys):
    assert run("grid-search", "--train", splits["train"], "--dev", splits["dev"], "--epochs", 1,
               "--lr-grid", "1e-2", "--l2-grid", "1e-4,1e-3", "--out", tmp_path / "g.json") == 0
    doc = json.loads((tmp_path / "g.json").read_text())
    assert len(doc["results"]) == 2


@pytest.mark.parametrize("flags", [
    ["--epochs", "0"],
    ["--factors", "2:7"],
    ["--model", "spn-memm", "--semiring", "max"],
    ["--lr", "-1"],
])
def test_config_errors_exit_2(tmp_path, splits, flags):
    assert run("train", "--train", splits["train"], "--out", tmp_path / "x", *flags) == 2


def test_missing_file_exit_2(tmp_path):
    assert run("train", "--train", tmp_path / "none.jsonl", "--out", tmp_path / "x") == 2


def test_verify_scope_and_fault(capsys):
    assert run("verify", "--scope", "spn") == 0
    assert "[PASS] spn oracle equivalence" in capsys.readouterr().out
    assert run("verify", "--scope", "chain", "--inject-fault") == 4
    assert "[FAIL]" in capsys.readouterr().out
    assert run("verify", "--scope", "bogus") == 2
