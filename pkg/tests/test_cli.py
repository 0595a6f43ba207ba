from __future__ import annotations

import json

import pytest

from calibloss.cli import main
from calibloss.datagen import read_dataset


@pytest.fixture(scope="module")
def bench(tmp_path_factory):
    path = tmp_path_factory.mktemp("cli") / "bench.jsonl"
    assert main(["generate", "--count", "30", "--seed", "7", "--points", "4", "--out", str(path)]) == 0
    return path


def test_generate_deterministic(bench, tmp_path, capsys):
    again = tmp_path / "again.jsonl"
    assert main(["generate", "--count", "30", "--seed", "7", "--points", "4", "--out", str(again)]) == 0
    assert again.read_bytes() == bench.read_bytes()
    assert len(bench.read_bytes().splitlines()) == 32
    out = capsys.readouterr().out
    assert "checksum" in out and "rad" in out


def test_generate_rejects_zero_count(tmp_path, capsys):
    assert main(["generate", "--count", "0", "--out", str(tmp_path / "x.jsonl")]) == 2
    assert "count" in capsys.readouterr().err


def test_generate_range_file(tmp_path):
    rf = tmp_path / "range.json"
    rf.write_text(json.dumps({"tx_": 1}))
    assert main(["generate", "--count", "2", "--range-file", str(rf), "--out", str(tmp_path / "a.jsonl")]) == 2
    rf.write_text(json.dumps({"tx": [0.5, 0.5]}))
    assert main(["generate", "--count", "2", "--range-file", str(rf), "--pitch-deg", "-5", "5",
                 "--out", str(tmp_path / "b.jsonl")]) == 0
    _, samples = read_dataset(tmp_path / "b.jsonl")
    assert all(s.gt.tx == 0.5 and abs(s.gt.theta_p) <= 0.0873 for s in samples)


def test_missing_dataset_is_io_error(tmp_path):
    assert main(["train", "--dataset", str(tmp_path / "nope.jsonl"), "--out", str(tmp_path / "o")]) == 3


def test_seed_from_environment(bench, tmp_path, monkeypatch):
    monkeypatch.setenv("UGCL_SEED", "5")
    out = tmp_path / "run"
    assert main(["solve", "--dataset", str(bench), "--limit", "2", "--max-iters", "3", "--out", str(out)]) == 0
    cfg = json.loads((out / "run_config").read_text())
    assert cfg["seed"] == 5 and cfg["subcommand"] == "solve"
    assert (out / "log.txt").exists() and (out / "curves_solve-VP-WC-R.csv").exists()
    monkeypatch.setenv("UGCL_SEED", "abc")
    assert main(["solve", "--dataset", str(bench), "--out", str(out)]) == 2


def test_train_and_evaluate(bench, tmp_path, capsys):
    out = tmp_path / "train"
    assert main(["train", "--dataset", str(bench), "--epochs", "1", "--seed", "1", "--out", str(out)]) == 0
    assert (out / "curves_UGCL-VP-WC-R.csv").exists()
    _, samples = read_dataset(bench)
    preds = tmp_path / "preds.jsonl"
    preds.write_text("".join(json.dumps(s.gt.to_dict()) + "\n" for s in samples))
    ev = tmp_path / "eval"
    assert main(["evaluate", "--dataset", str(bench), "--predictions", str(preds), "--reference",
                 "--out", str(ev)]) == 0
    text = (ev / "mae_table.txt").read_text()
    assert "reference:ablation/UGCL-VP" in text
    preds.write_text(json.dumps(samples[0].gt.to_dict()) + "\n")
    assert main(["evaluate", "--dataset", str(bench), "--predictions", str(preds), "--out", str(ev)]) == 2
    assert main(["train", "--dataset", str(bench), "--epochs", "0", "--out", str(out)]) == 2


def test_check_canonical_camera(tmp_path, capsys):
    f = tmp_path / "P.txt"
    f.write_text("1 0 0 0\n0 1 0 0\n0 0 1 0\n")
    assert main(["check", str(f)]) == 0
    out = capsys.readouterr().out
    lines = {l.split()[0]: l for l in out.splitlines() if l.startswith("  ")}
    assert "infinite" in lines["V_x"] and "infinite" in lines["V_y"] and "infinite" in lines["W_c"]
    assert "(0, 0) finite" in lines["V_z"]
    for key in ("r1.r2", "r1.r3", "r2.r3", "|RR^T-I|_F", "det(R)-1"):
        assert float(lines[key].split()[1]) == 0.0
    f.write_text("1 2 3")
    assert main(["check", str(f)]) == 2
    f.write_text(json.dumps({"fx": 100, "fy": 100, "px": 75, "py": 75, "b": 0.5, "d": 10,
                             "theta_p": 0.1, "tx": 0, "ty": 0, "tz": 5}))
    assert main(["check", str(f)]) == 0


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--trials", "2", "--seed", "1"]) == 0
    out = capsys.readouterr().out
    assert out.count("PASS") == 12


def test_help_lists_subcommands_and_units(capsys):
    with pytest.raises(SystemExit):
        main(["--help"])
    out = capsys.readouterr().out
    for cmd in ("generate", "solve", "train", "evaluate", "ablate", "gradcheck", "check"):
        assert cmd in out
    with pytest.raises(SystemExit):
        main(["generate", "--help"])
    assert "degrees" in capsys.readouterr().out
