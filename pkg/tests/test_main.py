import json

import pytest

from storyspace_main import build_parser, main


SYNTH_FLAGS = ["--topics", "3", "--slots", "5", "--stories", "4", "--test-stories", "2", "--feature-dim", "8"]


@pytest.fixture
def synthetic(tmp_path):
    out = tmp_path / "synthetic"
    assert main(["synth", "--out", str(out), "--seed", "3"] + SYNTH_FLAGS) == 0
    return out


@pytest.fixture
def trained(tmp_path, synthetic):
    run = tmp_path / "run"
    code = main(["train", "--corpus", str(synthetic / "train.jsonl"), "--vocab", str(synthetic / "vocab.txt"),
                 "--out", str(run), "--epochs", "2", "--alpha", "1", "--beta", "2", "--batch-size", "2",
                 "--lr", "0.003", "--max-len", "10"])
    assert code == 0
    return run


def test_synth_is_seeded(tmp_path, capsys):
    for name in ("a", "b"):
        assert main(["synth", "--out", str(tmp_path / name), "--seed", "11"] + SYNTH_FLAGS) == 0
    assert "train:" in capsys.readouterr().out
    for relative in ("train.jsonl", "test.jsonl", "vocab.txt", "synthetic.json", "train_features/train-00000.inft"):
        assert (tmp_path / "a" / relative).read_bytes() == (tmp_path / "b" / relative).read_bytes()


def test_invalid_values_are_usage_errors(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path), "--topics", "0"]) == 2
    assert "error: ValidationError" in capsys.readouterr().err
    assert main(["train", "--out", str(tmp_path)]) == 2
    assert "needs --corpus" in capsys.readouterr().err
    assert main(["train", "--corpus", "x.jsonl", "--ablation", "no-memory"]) == 2


def test_missing_inputs_fail(tmp_path, capsys):
    assert main(["train", "--corpus", str(tmp_path / "missing.jsonl"), "--out", str(tmp_path)]) == 1
    assert "FileNotFoundError" in capsys.readouterr().err
    assert main(["generate", "--checkpoint", str(tmp_path / "none.inck"), "--vocab", "v.txt",
                 "--features", "f.inft"]) == 1


def test_unknown_subcommand_exits_with_usage():
    assert main(["paint"]) == 2


def test_print_config_merges_file_and_flags(tmp_path, capsys):
    config = tmp_path / "run.env"
    config.write_text("epochs = 7\nlr = 0.01\nablation = no-telling\n")
    assert main(["train", "--config", str(config), "--lr", "0.02", "--print-config"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert "epochs = 7" in lines
    assert "lr = 0.02" in lines
    assert "ablation = no_telling" in lines

    config.write_text("colour = blue\n")
    assert main(["train", "--config", str(config), "--print-config"]) == 2


def test_train_writes_checkpoint_and_history(capsys, trained):
    assert "VARIANT: INet (full)" in capsys.readouterr().err
    assert (trained / "checkpoint.inck").is_file()
    history = [json.loads(line) for line in (trained / "loss_history.jsonl").read_text().splitlines()]
    assert [entry["b_total"] for entry in history] == [0, 1]


def test_resume_continues_from_checkpoint(tmp_path, synthetic, trained, capsys):
    code = main(["train", "--corpus", str(synthetic / "train.jsonl"), "--vocab", str(synthetic / "vocab.txt"),
                 "--out", str(trained), "--epochs", "3", "--alpha", "1", "--beta", "2", "--batch-size", "2",
                 "--lr", "0.003", "--max-len", "10", "--resume"])
    assert code == 0
    captured = capsys.readouterr()
    assert "Resuming from epoch 2" in captured.err
    assert "epochs: 3" in captured.out


def test_generate_with_hidden_slot(synthetic, trained, capsys):
    capsys.readouterr()
    args = ["generate", "--checkpoint", str(trained / "checkpoint.inck"), "--vocab", str(synthetic / "vocab.txt"),
            "--features", str(synthetic / "test_features" / "test-00000.inft"), "--beam", "2"]
    assert main(args + ["--hide", "2"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 5
    assert lines[1].startswith("slot 2 [hidden]:")
    assert main(args + ["--hide", "6"]) == 2


def test_interpolate_prints_nine_slots(synthetic, trained, capsys):
    capsys.readouterr()
    assert main(["interpolate", "--checkpoint", str(trained / "checkpoint.inck"),
                 "--vocab", str(synthetic / "vocab.txt"),
                 "--features", str(synthetic / "test_features" / "test-00001.inft"), "--beam", "1"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 9
    assert [line.split(":")[0] for line in lines if "[inserted]" in line] == [
        "slot 2 [inserted]", "slot 4 [inserted]", "slot 6 [inserted]", "slot 8 [inserted]"]


def test_evaluate_reports_json(synthetic, trained, capsys):
    capsys.readouterr()
    assert main(["evaluate", "--checkpoint", str(trained / "checkpoint.inck"),
                 "--vocab", str(synthetic / "vocab.txt"), "--corpus", str(synthetic / "test.jsonl"),
                 "--templates", str(synthetic / "synthetic.json"), "--hide-one-slot", "--interpolation",
                 "--beam", "2", "--format", "json"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["stories"] == 2 and report["sentences"] == 10
    assert 0.0 <= report["bleu_1"] <= 1.0
    assert "interpolation_consistency" in report


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--points", "1", "--instances", "2"]) == 0
    out = capsys.readouterr().out
    assert "forward_loss" in out and "FAIL" not in out


def test_parser_lists_every_command():
    choices = build_parser()._subparsers._group_actions[0].choices
    assert set(choices) == {"synth", "train", "generate", "interpolate", "evaluate", "gradcheck"}
