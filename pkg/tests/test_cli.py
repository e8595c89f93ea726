import csv
import os
from pathlib import Path

import pytest

from tdcedn.cli import COMMANDS, build_parser, run

GOLDEN = Path(__file__).parent / "golden"
SUBCOMMANDS = ["train", "predict", "fuse", "eval", "gradcheck", "inspect"]


def help_text(argv, capsys, monkeypatch):
    monkeypatch.setenv("COLUMNS", "100")
    assert run(argv + ["--help"]) == 0
    return capsys.readouterr().out


@pytest.mark.parametrize("cmd", [None] + SUBCOMMANDS)
def test_help_matches_golden(cmd, capsys, monkeypatch):
    text = help_text([cmd] if cmd else [], capsys, monkeypatch)
    golden = GOLDEN / f"help_{cmd or 'main'}.txt"
    if os.environ.get("TDCEDN_REGEN_GOLDEN"):
        golden.write_text(text)
    assert text == golden.read_text()


@pytest.mark.parametrize("cmd", SUBCOMMANDS)
def test_help_lists_every_flag(cmd, capsys, monkeypatch):
    text = help_text([cmd], capsys, monkeypatch)
    sub = build_parser()._subparsers._group_actions[0].choices[cmd]
    for action in sub._actions:
        for flag in action.option_strings:
            assert flag in text


def test_all_commands_present():
    assert sorted(COMMANDS) == sorted(SUBCOMMANDS)


def test_usage_errors(capsys):
    assert run([]) == 1
    assert "usage" in capsys.readouterr().err
    assert run(["bogus"]) == 1
    assert run(["eval", "--pred-dir", "x"]) == 1
    assert run(["gradcheck", "--unknown"]) == 1
    assert run(["train", "--manifest", "m", "--out-dir", "o", "--widths", "1,2"]) == 1


def test_runtime_errors(tmp_path, capsys):
    assert run(["predict", "--checkpoint", str(tmp_path / "no.ckpt"), "--manifest", "m", "--out-dir", str(tmp_path)]) == 2
    err = capsys.readouterr().err
    assert "no.ckpt" in err
    assert run(["fuse", "--a", str(tmp_path), "--b", str(tmp_path), "--out-dir", str(tmp_path / "f")]) == 2


def test_inspect_default_build(capsys):
    assert run(["inspect"]) == 0
    out = capsys.readouterr().out
    assert "encoder_params 14714688" in out
    assert "enc5_3.conv.weight" in out


def test_gradcheck_layers(capsys):
    assert run(["gradcheck", "--seed", "7", "--layers-only"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 9 and all(line.endswith("ok") for line in lines)


def test_pipeline_end_to_end(tmp_path, capsys):
    data = tmp_path / "data"
    assert run(["inspect", "--gen-synthetic", str(data)]) == 0
    manifest = data / "manifest.txt"
    cfg = tmp_path / "train.cfg"
    cfg.write_text("base_lr = 1e-3\nmax_iter = 2\ninput_size = 64\n")
    for policy in ("over3", "all"):
        out = tmp_path / f"run_{policy}"
        assert run(["train", "--config", str(cfg), "--manifest", str(manifest), "--out-dir", str(out),
                    "--consensus", policy]) == 0
        assert (out / "final.ckpt").exists()
        assert len((out / "loss_log.csv").read_text().splitlines()) == 3
        assert run(["predict", "--checkpoint", str(out / "final.ckpt"), "--manifest", str(manifest),
                    "--out-dir", str(tmp_path / f"pred_{policy}")]) == 0
    assert run(["fuse", "--a", str(tmp_path / "pred_over3"), "--b", str(tmp_path / "pred_all"),
                "--gamma", "0.5", "--out-dir", str(tmp_path / "fused")]) == 0
    assert sorted(p.name for p in (tmp_path / "fused").iterdir()) == ["disk.pgm", "ridge.pgm", "square.pgm"]
    assert run(["eval", "--pred-dir", str(tmp_path / "fused"), "--manifest", str(manifest),
                "--out", str(tmp_path / "pr.csv")]) == 0
    rows = list(csv.reader((tmp_path / "pr.csv").open()))
    assert len(rows) == 1 + 99 + 2 and rows[-2] == ["ODS", "OIS", "AP"]
    capsys.readouterr()
    assert run(["inspect", "--checkpoint", str(tmp_path / "run_all" / "final.ckpt")]) == 0
    assert "encoder_params 14714688" in capsys.readouterr().out


def test_train_resume_via_cli(tmp_path):
    data = tmp_path / "data"
    run(["inspect", "--gen-synthetic", str(data), "--size", "32"])
    common = ["--manifest", str(data / "manifest.txt"), "--size", "32", "--lr", "1e-3", "--widths", "2,3,3,3,3"]
    assert run(["train", "--out-dir", str(tmp_path / "a"), "--max-iter", "4"] + common) == 0
    assert run(["train", "--out-dir", str(tmp_path / "a"), "--max-iter", "6",
                "--resume", str(tmp_path / "a" / "final.ckpt")] + common) == 0
    lines = (tmp_path / "a" / "loss_log.csv").read_text().splitlines()
    assert [line.split(",")[0] for line in lines] == ["iter", "1", "2", "3", "4", "5", "6"]
