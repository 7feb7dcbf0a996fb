import csv
import json
import os

import pytest

from tsl import _io
from tsl.cli import build_parser, run
from tsl.corpus import PROBLEMS, load_source
from tsl.minilang import loads_traces

SUM_LOOP = "fn f(n:int){ s := 0; for i in 0 .. n { s := s + i; } return s; }\n"


def run_json(capsys, argv):
    code = run(argv)
    out = capsys.readouterr().out.strip().splitlines()
    return code, [json.loads(line) for line in out]


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """gen-corpus -> trace -> train on a tiny corpus, shared by the tests below."""
    root = tmp_path_factory.mktemp("pipe")
    corpus, cache, model = root / "corpus", root / "cache.npz", root / "run"
    assert run(["gen-corpus", "--out", str(corpus), "--variants-per-class", "2", "--n-inputs", "3",
                "--sample-size", "2", "--seed", "1"]) == 0
    assert run(["trace", "--corpus", str(corpus), "--out", str(cache), "--histogram", str(root / "hist.csv")]) == 0
    assert run(["train", "--cache", str(cache), "--out", str(model), "--hidden", "4", "--epochs", "2",
                "--checkpoint-every", "1", "--seed", "1"]) == 0
    return root


def test_gradcheck_seed_7(capsys):
    code, (out,) = run_json(capsys, ["gradcheck", "--seed", "7", "--probes", "3"])
    assert code == 0 and out["max_relative_error"] < 1e-4


def test_trace_single_program(tmp_path, capsys):
    prog, spec, suite, out = (tmp_path / n for n in ("p.mini", "spec.json", "suite.json", "t.jsonl"))
    prog.write_text(SUM_LOOP)
    spec.write_text(json.dumps({"params": [{"kind": "int", "lo": 1, "hi": 400}], "seed": 0}))
    assert run(["suite", "--program", str(prog), "--spec", str(spec), "--n-inputs", "4", "--out", str(suite),
                "--curve", str(tmp_path / "cov.csv"), "--curve-n", "1,2,4"]) == 0
    assert run(["trace", "--program", str(prog), "--suite", str(suite), "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert len(lines) == 4
    n_values = [int(json.loads(line)["input"][0]) for line in lines]
    for t, n in zip(loads_traces(out.read_text()), n_values):
        # the parameter, s := 0, then one write to i and one to s per iteration
        assert len(t.states) == 2 + 2 * n
    rows = read_csv(tmp_path / "cov.csv")
    assert [r["N"] for r in rows] == ["1", "2", "4"]
    assert all(0 <= float(r["coverage"]) <= 1 for r in rows)
    capsys.readouterr()


def test_pipeline_artifacts(pipeline):
    for name in ("manifest.json", "suite_maxdiff.json"):
        assert (pipeline / "corpus" / name).exists()
    rows = read_csv(pipeline / "hist.csv")
    assert set(rows[0]) == {"split", "program", "execution", "length"}
    run_dir = pipeline / "run"
    for name in ("model.bin", "model.json", "config.json", "train_config.json", "metrics.jsonl"):
        assert (run_dir / name).exists(), name
    assert len((run_dir / "metrics.jsonl").read_text().splitlines()) >= 2


def test_eval_prints_metrics_record(pipeline, capsys):
    code, (rec,) = run_json(capsys, ["eval", "--cache", str(pipeline / "cache.npz"), "--model", str(pipeline / "run"),
                                     "--split", "train"])
    assert code == 0
    assert {"acc", "f1_macro", "H", "sumM", "reduction_mean", "reduction_median"} <= set(rec)
    assert 0 <= rec["acc"] <= 1


def test_train_is_idempotent(pipeline, tmp_path):
    again = tmp_path / "run"
    assert run(["train", "--cache", str(pipeline / "cache.npz"), "--out", str(again), "--hidden", "4",
                "--epochs", "2", "--checkpoint-every", "1", "--seed", "1"]) == 0
    for name in ("model.bin", "metrics.jsonl", "config.json"):
        assert (again / name).read_bytes() == (pipeline / "run" / name).read_bytes()


def test_resume_extends_run(pipeline, tmp_path):
    import shutil
    work = tmp_path / "run"
    shutil.copytree(pipeline / "run", work)
    assert run(["train", "--cache", str(pipeline / "cache.npz"), "--out", str(work), "--hidden", "4",
                "--epochs", "3", "--checkpoint-every", "1", "--seed", "1", "--resume"]) == 0
    lines = (work / "metrics.jsonl").read_text().splitlines()
    assert [json.loads(l)["epoch"] for l in lines if json.loads(l)["split"] == "train"] == [1, 2, 3]


def test_invariants_commands(pipeline, tmp_path, capsys):
    ds = tmp_path / "inv.jsonl"
    code, (summary,) = run_json(capsys, ["invariants-build", "--corpus", str(pipeline / "corpus"), "--out", str(ds)])
    assert code == 0 and summary["positive"] == summary["negative"] > 0
    assert all(json.loads(l)["verification"] == "dynamic" for l in ds.read_text().splitlines())
    assert run(["invariants-train", "--dataset", str(ds), "--cache", str(pipeline / "cache.npz"),
                "--out", str(tmp_path / "inv"), "--hidden", "4", "--epochs", "1"]) == 0
    assert set(json.loads((tmp_path / "inv" / "test.json").read_text())) >= {"acc", "f1_macro"}


def test_ablate_fraction_csv(pipeline, tmp_path):
    assert run(["ablate", "fraction", "--cache", str(pipeline / "cache.npz"), "--out", str(tmp_path),
                "--hidden", "4", "--epochs", "1", "--fractions", "1.0,0.5"]) == 0
    rows = read_csv(tmp_path / "fraction.csv")
    assert [r["fraction"] for r in rows] == ["0.5", "1.0"]
    assert {"acc", "f1_macro", "reduction_mean"} <= set(rows[0])


def test_usage_errors_exit_1(capsys):
    assert run([]) == 1
    assert run(["no-such-command"]) == 1
    assert run(["train", "--out", "x"]) == 1
    assert run(["trace", "--out", "x"]) == 1
    assert run(["ablate", "reduction", "--out", "x"]) == 1
    capsys.readouterr()


def test_bad_seed_env_is_usage_error(monkeypatch, tmp_path, capsys):
    monkeypatch.setenv("TSL_SEED", "abc")
    assert run(["gradcheck"]) == 1
    capsys.readouterr()


def test_runtime_errors_exit_2(tmp_path, capsys):
    assert run(["eval", "--cache", str(tmp_path / "missing.npz"), "--model", str(tmp_path)]) == 2
    bad = tmp_path / "bad.mini"
    bad.write_text("fn f( {")
    spec = tmp_path / "s.json"
    spec.write_text(json.dumps({"params": [{"kind": "int", "lo": 0, "hi": 3}], "seed": 0}))
    assert run(["suite", "--program", str(bad), "--spec", str(spec), "--out", str(tmp_path / "o.json")]) == 2
    err = capsys.readouterr().err
    assert "ParseError" in err


def test_help_documents_every_flag(capsys):
    parser = build_parser()
    sub = next(a for a in parser._actions if a.dest == "command")
    for name, p in sub.choices.items():
        for action in p._actions:
            if action.option_strings and action.dest != "help":
                assert action.help, f"{name} {action.option_strings}"
    assert run(["train", "--help"]) == 0
    assert "--lambda-mask" in capsys.readouterr().out


def test_atomic_write_leaves_nothing_on_failure(tmp_path, monkeypatch):
    target = tmp_path / "artifact.json"

    def boom(src, dst):
        raise OSError("disk full")
    monkeypatch.setattr(_io.os, "replace", boom)
    with pytest.raises(OSError):
        _io.atomic_write_text(target, "{}")
    assert os.listdir(tmp_path) == []


def test_atomic_write_keeps_previous_version(tmp_path, monkeypatch):
    target = tmp_path / "artifact.json"
    _io.atomic_write_text(target, "old")

    class Interrupted(BaseException):
        pass

    real = _io.os.fdopen

    def half_write(fd, mode):
        fh = real(fd, mode)
        fh.write(b"partial")
        raise Interrupted()
    monkeypatch.setattr(_io.os, "fdopen", half_write)
    with pytest.raises(Interrupted):
        _io.atomic_write_text(target, "new")
    assert target.read_text() == "old" and os.listdir(tmp_path) == ["artifact.json"]


def test_shipped_program_through_cli(tmp_path, capsys):
    prog = tmp_path / "bubble.mini"
    prog.write_text(load_source("maxdiff_bubble"))
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps(PROBLEMS["maxdiff"].to_json()))
    code, (out,) = run_json(capsys, ["suite", "--program", str(prog), "--spec", str(spec), "--n-inputs", "5",
                                     "--out", str(tmp_path / "suite.json")])
    assert code == 0 and out["n"] == 5 and out["coverage"] >= 0.9
