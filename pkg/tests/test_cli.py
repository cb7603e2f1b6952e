import json

import pytest

from layoutlmv2.cli import main

from conftest import FIXTURES


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    assert main(["gen-corpus", "--n", "5", "--seed", "2", "--out", str(out)]) == 0
    return out


def test_gen_corpus_writes_manifest(corpus, tmp_path):
    manifest = json.loads((corpus / "manifest.json").read_text())
    assert manifest["count"] == 5 and len(manifest["files"]) >= 5
    run = json.loads((corpus / "run_manifest.gen-corpus.json").read_text())
    assert run["seed"] == 2 and len(run["config_hash"]) == 64
    # same seed, same bytes
    assert main(["gen-corpus", "--n", "5", "--seed", "2", "--out", str(tmp_path)]) == 0
    for name in manifest["files"]:
        assert (tmp_path / name).read_bytes() == (corpus / name).read_bytes()


def test_bad_flags_exit_1(tmp_path, capsys):
    assert main(["gen-corpus", "--n", "0", "--out", str(tmp_path)]) == 1
    assert main(["pretrain", "--data", str(tmp_path / "missing"), "--out", str(tmp_path)]) == 1
    assert main(["finetune", "--task", "ner", "--data", "x"]) == 1
    assert main(["pretrain", "--data", "x", "--spatial-bias", "maybe"]) == 1
    assert main([]) == 1
    assert "error" in capsys.readouterr().err


def test_bad_config_file(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"train": {"nope": 1}}))
    assert main(["gen-corpus", "--config", str(cfg), "--out", str(tmp_path)]) == 1
    cfg.write_text("{not json")
    assert main(["gen-corpus", "--config", str(cfg), "--out", str(tmp_path)]) == 1


def test_pretrain_finetune_eval_predict(corpus, tmp_path, capsys):
    out = tmp_path / "run"
    args = ["pretrain", "--data", str(corpus), "--out", str(out), "--steps", "2", "--preset", "micro"]
    assert main(args) == 0
    assert (out / "pretrain.manifest.json").exists() and (out / "pretrain.curves.csv").exists()
    # refuses to clobber without --force
    assert main(args) == 1
    capsys.readouterr()
    assert main(args + ["--force", "--tasks", "mvlm,tim", "--spatial-bias", "off"]) == 0
    printed = json.loads(capsys.readouterr().out)
    metrics = json.loads((out / "pretrain.metrics.json").read_text())
    assert printed["metrics"] == metrics
    assert metrics["tia_accuracy"] is None and 0.0 <= metrics["tim_accuracy"] <= 1.0

    assert main(["finetune", "--task", "classification", "--data", str(corpus), "--out", str(out),
                 "--checkpoint", str(out / "pretrain"), "--steps", "2"]) == 0
    capsys.readouterr()
    assert main(["eval", "--task", "classification", "--data", str(corpus),
                 "--checkpoint", str(out / "classification")]) == 0
    metrics = json.loads(capsys.readouterr().out)
    assert set(metrics) == {"accuracy"}
    # the pre-training checkpoint has no task head
    assert main(["eval", "--task", "qa", "--data", str(corpus), "--checkpoint", str(out / "pretrain")]) == 1

    assert main(["predict", "--task", "classification", "--data", str(corpus),
                 "--checkpoint", str(out / "classification"), "--out", str(out)]) == 0
    lines = (out / "predictions.classification.jsonl").read_text().splitlines()
    assert len(lines) == 5 and "pred" in json.loads(lines[0])


def test_config_sections_and_flag_precedence(corpus, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"train": {"max_steps": 1, "lr": 0.5, "seed": 9}, "model": {"layers": 1}}))
    out = tmp_path / "o"
    assert main(["pretrain", "--config", str(cfg), "--data", str(corpus), "--out", str(out),
                 "--preset", "micro", "--lr", "0.001"]) == 0
    run = json.loads((out / "run_manifest.pretrain.json").read_text())
    assert run["config"]["train"]["lr"] == 0.001 and run["config"]["train"]["max_steps"] == 1
    assert run["config"]["model"]["layers"] == 1 and run["seed"] == 9


def test_funsd_file_as_data(tmp_path, capsys):
    ann = FIXTURES / "funsd" / "form_0001.json"
    assert main(["finetune", "--task", "labeling", "--data", str(ann), "--out", str(tmp_path),
                 "--steps", "1", "--preset", "micro"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert "f1" in report["train"]


def test_grad_check_command(tmp_path, capsys):
    assert main(["grad-check", "--coords", "1", "--out", str(tmp_path)]) == 0
    assert "bias_tables" in capsys.readouterr().out
    # an impossible tolerance turns into a runtime failure
    assert main(["grad-check", "--coords", "1", "--tolerance", "0", "--out", str(tmp_path)]) == 2
