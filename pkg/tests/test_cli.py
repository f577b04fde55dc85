import os

import numpy as np
import pytest

from mcf import data as D
from mcf.cli import display_name, main


def _gen(tmp_path, name, *extra):
    path = str(tmp_path / name)
    assert main(["gen-synth", "--out", path, *extra]) == 0
    return path


def _cfg(tmp_path, text):
    path = tmp_path / "run.cfg"
    path.write_text(text)
    return str(path)


def test_display_names():
    assert display_name("d_fg") == "d_FG" and display_name("t_pe") == "T_PE"


def test_gen_synth_is_deterministic(tmp_path):
    a = _gen(tmp_path, "a.mcfb", "--geometry", "toy", "--n", "20", "--seed", "4")
    b = _gen(tmp_path, "b.mcfb", "--geometry", "toy", "--n", "20", "--seed", "4")
    assert open(a, "rb").read() == open(b, "rb").read()


def test_gen_synth_default_geometry(tmp_path):
    path = _gen(tmp_path, "p.mcfb", "--n", "1")
    h = D.read_bundle(path).header
    assert (h.t_pe, h.d_pe, h.t_vs, h.d_vs, h.t_fg, h.d_fg) == (49, 512, 197, 768, 512, 768)


def test_gen_synth_empty_warns(tmp_path, caplog):
    path = _gen(tmp_path, "e.mcfb", "--geometry", "toy", "--n", "0")
    assert "n = 0" in caplog.text
    assert len(D.read_bundle(path)) == 0


def test_gen_synth_bad_args_exit_2(tmp_path):
    assert main(["gen-synth", "--out", str(tmp_path / "x"), "--signal-strength", "0"]) == 2
    assert not (tmp_path / "x").exists()


@pytest.fixture
def toy_run(tmp_path):
    train = _gen(tmp_path, "train.mcfb", "--mode", "linear", "--geometry", "toy", "--n", "32", "--n-disc", "5")
    val = _gen(tmp_path, "val.mcfb", "--mode", "linear", "--geometry", "toy", "--n", "16", "--n-disc", "5",
               "--seed", "1")
    cfg = _cfg(tmp_path, f"preset = toy-mha\nepochs = 3\nbatch_size = 8\n"
                         f"train_bundle = {train}\nval_bundle = {val}\n")
    return cfg, train, val


def test_train_history_is_byte_identical(tmp_path, toy_run):
    cfg = toy_run[0]
    for name in ("r1", "r2"):
        assert main(["train", "--config", cfg, "--out", str(tmp_path / name), "--no-timestamp", "--seed", "7"]) == 0
    h1 = (tmp_path / "r1" / "history.jsonl").read_bytes()
    assert h1 == (tmp_path / "r2" / "history.jsonl").read_bytes()
    assert h1.count(b"\n{") == 3
    assert (tmp_path / "r1/checkpoint/params.bin").read_bytes() == (tmp_path / "r2/checkpoint/params.bin").read_bytes()


def test_train_timestamp_line(tmp_path, toy_run):
    assert main(["train", "--config", toy_run[0], "--out", str(tmp_path / "r")]) == 0
    assert b"# timestamp:" in (tmp_path / "r" / "history.jsonl").read_bytes()


@pytest.mark.parametrize("text", ["preset = toy-mha\nbogus = 3\n", "preset = nope\n", "preset = toy-mha\nlr0 = -1\n",
                                  "preset = toy-mha\ntrain_bundle = /missing.mcfb\n"])
def test_invalid_config_writes_nothing(tmp_path, text):
    out = tmp_path / "out"
    assert main(["train", "--config", _cfg(tmp_path, text), "--out", str(out)]) == 2
    assert not out.exists()


def test_task_mismatch_writes_nothing(tmp_path, toy_run):
    cfg = _cfg(tmp_path, f"preset = toy-mha\ntask = single_label\ntrain_bundle = {toy_run[1]}\n")
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "out")]) == 2
    assert not (tmp_path / "out").exists()


def test_val_geometry_mismatch_writes_nothing(tmp_path, toy_run):
    val = _gen(tmp_path, "v2.mcfb", "--mode", "linear", "--geometry", "toy", "--n", "4", "--n-disc", "5",
               "--d-fg", "8")
    cfg = _cfg(tmp_path, f"preset = toy-mha\ntrain_bundle = {toy_run[1]}\nval_bundle = {val}\n")
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "out")]) == 3
    assert not (tmp_path / "out").exists()


def test_eval_and_predict(tmp_path, toy_run, capsys):
    cfg, _, val = toy_run
    run = tmp_path / "run"
    assert main(["train", "--config", cfg, "--out", str(run), "--no-timestamp"]) == 0
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(run / "checkpoint"), "--bundle", val]) == 0
    text = capsys.readouterr().out
    assert "task = multilabel_cont" in text and "accuracy" not in text
    map_line = next(line for line in text.splitlines() if line.startswith("map = "))
    assert len(map_line.split("=")[1].strip().split(".")[1]) == 4
    pred = tmp_path / "pred.tsv"
    assert main(["predict", "--checkpoint", str(run / "checkpoint"), "--bundle", val, "--out", str(pred)]) == 0
    rows = pred.read_text().splitlines()
    assert len(rows) == 16 and len(rows[0].split("\t")) == 3


def test_single_label_eval_report(tmp_path, capsys):
    train = _gen(tmp_path, "x.mcfb", "--geometry", "toy", "--n", "16")
    cfg = _cfg(tmp_path, f"preset = toy-sag\nepochs = 1\ntrain_bundle = {train}\n")
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "r")]) == 0
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(tmp_path / "r/checkpoint"), "--bundle", train]) == 0
    text = capsys.readouterr().out
    assert "accuracy = " in text and "macro_f1 = " in text and "map" not in text


def test_eval_geometry_mismatch_names_field(tmp_path, toy_run, capsys):
    cfg = toy_run[0]
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "r")]) == 0
    other = _gen(tmp_path, "o.mcfb", "--mode", "linear", "--geometry", "toy", "--n", "4", "--n-disc", "5",
                 "--d-fg", "8")
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(tmp_path / "r/checkpoint"), "--bundle", other]) == 3
    assert "d_FG" in capsys.readouterr().err


def test_eval_corrupt_bundle_reports_code(tmp_path, toy_run, capsys):
    assert main(["train", "--config", toy_run[0], "--out", str(tmp_path / "r")]) == 0
    bad = tmp_path / "bad.mcfb"
    raw = bytearray(open(toy_run[2], "rb").read())
    raw[0:4] = b"XXXX"
    bad.write_bytes(bytes(raw))
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(tmp_path / "r/checkpoint"), "--bundle", str(bad)]) == 3
    assert "E_MAGIC" in capsys.readouterr().err


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--max-entries", "3"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and out.rstrip().splitlines()[-1].startswith("PASS")


def test_gradcheck_detects_broken_gradient(capsys):
    assert main(["gradcheck", "--max-entries", "2", "--break-gradient"]) == 4
    assert "failing tensors" in capsys.readouterr().out


def test_gradcheck_rejects_full_size_preset():
    assert main(["gradcheck", "--preset", "emotic-mha"]) == 2
