import csv
import io
import json

import pytest

from streamgym import __version__
from streamgym.cli import main
from streamgym.trace import load_corpus, load_trace


@pytest.fixture
def legacy(tmp_path):
    path = tmp_path / "legacy.trace"
    path.write_text("".join(f"{t} {1.0 + (t % 5) * 0.7}\n" for t in range(120)))
    return path


def test_no_arguments_is_usage_error(capsys):
    assert main([]) == 1
    assert "usage" in capsys.readouterr().err


def test_unknown_flag_is_usage_error(capsys):
    assert main(["simulate", "--trace", "x", "--frobnicate"]) == 1
    assert "usage" in capsys.readouterr().err


def test_version(capsys):
    with pytest.raises(SystemExit) as info:
        main(["--version"])
    assert info.value.code == 0
    assert __version__ in capsys.readouterr().out


def test_augment(legacy, tmp_path):
    out = tmp_path / "timed.trace"
    assert main(["augment", "--in", str(legacy), "--base-rtprop", "0.08", "--noise", "0.1", "--seed", "1",
                 "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert all(len(line.split()) == 3 for line in lines)
    assert all(0.072 <= float(line.split()[2]) <= 0.088 for line in lines)
    again = tmp_path / "again.trace"
    main(["augment", "--in", str(legacy), "--seed", "1", "--out", str(again)])
    assert again.read_text() == out.read_text()


def test_simulate_default_manifest_has_49_rows(legacy, capsys):
    assert main(["simulate", "--sim", "t", "--trace", str(legacy), "--abr", "rate", "--qoe", "hd"]) == 0
    rows = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
    assert len(rows) == 49


def test_seed_env_fallback(legacy, capsys, monkeypatch):
    args = ["simulate", "--sim", "o", "--trace", str(legacy)]
    monkeypatch.setenv("STREAMGYM_SEED", "5")
    main(args)
    env_out = capsys.readouterr().out
    main(args + ["--seed", "5"])
    assert capsys.readouterr().out == env_out
    main(args + ["--seed", "6"])
    assert capsys.readouterr().out != env_out
    monkeypatch.setenv("STREAMGYM_SEED", "nope")
    assert main(args) == 1


def test_runtime_error_exit_code(tmp_path, capsys):
    assert main(["simulate", "--trace", str(tmp_path / "missing.trace")]) == 2
    bad = tmp_path / "bad.trace"
    bad.write_text("0 1\n0 2\n")
    assert main(["simulate", "--trace", str(bad)]) == 2


@pytest.mark.parametrize("args", [
    ["simulate", "--trace", "x", "--abr", "mpc"],
    ["simulate", "--trace", "x", "--abr", "fixed:9"],
    ["simulate", "--trace", "x", "--sim", "q"],
    ["simulate", "--trace", "x", "--mu", "-1"],
    ["gen-corpus", "--out", "x", "--test-fraction", "1.5"],
    ["gen-trace", "--btlbw", "3", "--cca", "reno", "--out", "x"],
    ["serve", "--abr", "rate", "--listen", "nohost"],
    ["train", "--corpus", "c", "--out", "o", "--workers", "0"],
])
def test_flags_validated_before_work(args):
    assert main(args) == 1


def test_corpus_train_eval_pipeline(tmp_path, capsys):
    corpus = tmp_path / "corpus"
    assert main(["gen-corpus", "--cca", "cubic", "--levels", "3,4", "--repetitions", "3", "--duration", "60",
                 "--out", str(corpus), "--seed", "2"]) == 0
    c = load_corpus(corpus)
    assert len(c.train) == 5 and len(c.test) == 1
    model_dir = tmp_path / "model"
    assert main(["train", "--corpus", str(corpus), "--out", str(model_dir), "--iterations", "5", "--qoe", "hd"]) == 0
    assert (model_dir / "model.json").exists() and (model_dir / "curve.csv").exists()
    out = tmp_path / "eval"
    assert main(["eval", "--abr", f"policy:{model_dir / 'model.json'}", "--abr", "fixed:0", "--corpus", str(corpus),
                 "--sim", "o", "--qoe", "hd", "--seeds", "0,1", "--out", str(out)]) == 0
    assert (out / "comparison.csv").exists()
    report = (out / "fixed_0" / "report.csv").read_text().splitlines()
    assert len(report) == 3
    # missing model file is a runtime failure
    assert main(["eval", "--abr", "policy:/no/such.json", "--corpus", str(corpus), "--out", str(out)]) == 2


def test_gen_corpus_from_files(legacy, tmp_path):
    src = tmp_path / "src"
    src.mkdir()
    for i in range(5):
        (src / f"t{i}.trace").write_text(legacy.read_text())
    out = tmp_path / "out"
    assert main(["gen-corpus", "--from", str(src), "--augment", "0.1", "--out", str(out)]) == 0
    c = load_corpus(out)
    assert len(c.traces) == 5 and len(c.test) == 1
    assert all(0.072 <= r <= 0.088 for t in c.traces for r in t.rtprops)


def test_gen_trace_and_oracle(tmp_path, capsys):
    tr = tmp_path / "bbr.trace"
    assert main(["gen-trace", "--cca", "bbr", "--btlbw", "3", "--loss", "0.02", "--duration", "30",
                 "--out", str(tr)]) == 0
    assert len(load_trace(tr)) == 30
    assert main(["oracle", "--trace", str(tr), "--mode", "exhaustive", "--horizon", "3"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert len(out["qualities"]) == 3 and out["mode"] == "exhaustive"
    assert main(["oracle", "--trace", str(tr), "--mode", "exhaustive", "--horizon", "12"]) == 2


def test_config_file_supplies_defaults(legacy, tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"trace": str(legacy), "qoe": {"utility": "hd", "mu": 8}, "abr": "fixed:1"}))
    assert main(["--config", str(cfg), "simulate"]) == 0
    rows = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
    assert {r["quality"] for r in rows} == {"1"}
    assert main(["--config", str(cfg), "simulate", "--abr", "fixed:2"]) == 0
    rows = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
    assert {r["quality"] for r in rows} == {"2"}
    cfg.write_text(json.dumps({"bogus_key": 1}))
    assert main(["--config", str(cfg), "simulate", "--trace", str(legacy)]) == 1
    cfg.write_text("{not json")
    assert main(["--config", str(cfg), "simulate", "--trace", str(legacy)]) == 1
