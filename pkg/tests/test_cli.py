import json

import numpy as np
import pytest

from cavm import cli
from cavm.phantom import read_planes
from cavm.training import TrainingFault, read_checkpoint

from helpers import small_config


def run(*args):
    return cli.main([str(a) for a in args])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert run("gen-data", "--out", data, "--train", 10, "--val", 2, "--test", 2, "--size", 32, "--seed", 100) == 0
    config = root / "run.json"
    config.write_text(json.dumps({**small_config().to_dict(), "data": str(data)}, indent=2))
    tok = root / "tok.ckpt"
    assert run("train-tokenizer", "--config", config, "--out", tok, "--steps", 3) == 0
    ar = root / "ar.ckpt"
    assert run("train-ar", "--config", config, "--init", tok, "--out", ar, "--steps", 2) == 0
    return {"root": root, "data": data, "config": config, "tok": tok, "ar": ar}


def test_gen_data_layout(workspace):
    data = workspace["data"]
    files = sorted(p.relative_to(data).as_posix() for p in data.rglob("*.cavm"))
    assert len(files) == 14
    manifest = json.loads((data / "manifest.json").read_text())
    for split, count in (("train", 10), ("val", 2), ("test", 2)):
        assert manifest["splits"][split]["count"] == count == len(list((data / split).glob("*.cavm")))
    assert manifest["splits"]["val"]["seeds"] == [110, 111]


def test_gen_data_rerun_is_byte_identical(workspace, tmp_path):
    assert run("gen-data", "--out", tmp_path, "--train", 10, "--val", 2, "--test", 2, "--size", 32, "--seed", 100) == 0
    for p in workspace["data"].rglob("*"):
        if p.is_file():
            assert (tmp_path / p.relative_to(workspace["data"])).read_bytes() == p.read_bytes()


def test_gen_data_unwritable(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert run("gen-data", "--out", blocker / "sub", "--train", 1) == 2


def test_training_outputs(workspace):
    tok, ar = read_checkpoint(workspace["tok"]), read_checkpoint(workspace["ar"])
    assert tok.phase == "pretrain" and tok.step == 3
    assert ar.phase == "autoregression" and ar.step == 2
    log = (workspace["root"] / "ar.ckpt.metrics.jsonl").read_text().splitlines()
    assert json.loads(log[0])["step"] == 0
    assert not list(workspace["root"].glob("*.tmp"))


def test_train_ar_requires_init(workspace, capsys):
    assert run("train-ar", "--config", workspace["config"], "--out", workspace["root"] / "x.ckpt") == 2
    assert "--init" in capsys.readouterr().err


def test_config_parse_error_reports_position(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{\n  "seed": 1,\n  "num_steps": ,\n}')
    assert run("train-tokenizer", "--config", bad, "--data", tmp_path, "--out", tmp_path / "o.ckpt") == 2
    assert "bad.json:3:" in capsys.readouterr().err


def test_unknown_config_key(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"bogus": 1}))
    assert run("train-tokenizer", "--config", cfg, "--data", tmp_path, "--out", tmp_path / "o.ckpt") == 2
    assert "bogus" in capsys.readouterr().err


def test_missing_data_dir(workspace, tmp_path):
    assert run("train-tokenizer", "--data", tmp_path / "nope", "--out", tmp_path / "o.ckpt") == 2


def test_numeric_fault_exit_code(workspace, monkeypatch, capsys, tmp_path):
    def explode(*a, **k):
        raise TrainingFault(17, "non-finite output of exp")

    monkeypatch.setattr(cli, "pretrain_tokenizers", explode)
    assert run("train-tokenizer", "--config", workspace["config"], "--out", tmp_path / "o.ckpt") == 3
    assert "step 17" in capsys.readouterr().err


def test_corrupt_checkpoint_is_usage_error(workspace, tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"garbage")
    sample = next((workspace["data"] / "test").glob("*.cavm"))
    assert run("synthesize", "--ckpt", bad, "--input", sample, "--out", tmp_path) == 2


def test_missing_input_is_io_error(workspace, tmp_path):
    assert run("synthesize", "--ckpt", workspace["ar"], "--input", tmp_path / "none.cavm", "--out", tmp_path) == 4


@pytest.mark.parametrize("steps,names", [(3, ["00_y_ld", "01_y_hd", "02_y_sd"]), (1, ["00_y_sd"])])
def test_synthesize_outputs(workspace, tmp_path, steps, names):
    sample = sorted((workspace["data"] / "test").glob("*.cavm"))[0]
    out = tmp_path / "out"
    assert run("synthesize", "--ckpt", workspace["ar"], "--input", sample, "--out", out, "--steps", steps, "--preview") == 0
    assert sorted(p.stem for p in out.glob("*.cavm")) == names
    assert sorted(p.stem for p in out.glob("*.pgm")) == names
    planes, header = read_planes(out / f"{names[-1]}.cavm")
    assert planes["y_sd"].shape == (32, 32) and "config_hash" in header["meta"]
    again = tmp_path / "again"
    run("synthesize", "--ckpt", workspace["ar"], "--input", sample, "--out", again, "--steps", steps)
    for name in names:
        assert (out / f"{name}.cavm").read_bytes() == (again / f"{name}.cavm").read_bytes()


def test_synthesize_size_mismatch(workspace, tmp_path):
    run("gen-data", "--out", tmp_path / "big", "--train", 0, "--val", 0, "--test", 1, "--size", 64)
    sample = next((tmp_path / "big" / "test").glob("*.cavm"))
    assert run("synthesize", "--ckpt", workspace["ar"], "--input", sample, "--out", tmp_path / "o") == 2


def test_evaluate_report(workspace, tmp_path, capsys):
    report = tmp_path / "report.txt"
    assert run("evaluate", "--ckpt", workspace["ar"], "--data", workspace["data"], "--out", report) == 0
    text = report.read_text()
    cfg_hash = read_checkpoint(workspace["ar"]).cfg.hash()
    assert text.startswith(f"# config_hash={cfg_hash} seed=0")
    records = [json.loads(line) for line in (tmp_path / "report.txt.jsonl").read_text().splitlines()]
    assert len(records) == 4
    assert {r["method"] for r in records} == {"copy input (T1w)", "CAVM"}
    assert all(r["config_hash"] == cfg_hash and r["n"] == 2 for r in records)
    assert "Tumor SSIM" in capsys.readouterr().out


def test_ablate_rows(workspace, tmp_path):
    report = tmp_path / "ablation.txt"
    assert run("ablate", "--config", workspace["config"], "--out", report, "--pretrain-steps", 2, "--ar-steps", 1) == 0
    rows = [line.split("  ")[0] for line in report.read_text().splitlines()[3:]]
    assert rows == ["One Step", "Two Steps", "w/o Dose-variant Autoregression", "CAVM"]
    methods = [json.loads(line)["method"] for line in (tmp_path / "ablation.txt.jsonl").read_text().splitlines()]
    assert methods[::2] == rows


def test_commands_do_not_mutate_inputs(workspace, tmp_path):
    before = {p: p.read_bytes() for p in (workspace["ar"], *sorted((workspace["data"] / "test").glob("*.cavm")))}
    run("evaluate", "--ckpt", workspace["ar"], "--data", workspace["data"], "--out", tmp_path / "r.txt")
    assert all(p.read_bytes() == b for p, b in before.items())


def test_no_command_is_usage_error():
    assert run() == 2
