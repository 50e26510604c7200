import subprocess
import sys

import pytest

from conftest import toy_text
from mtss.checkpoint import read_checkpoint
from mtss.cli import main
from mtss.metrics import MetricsRecord, append_records, read_records

EVAL = ("[eval]\ntrain_size = 16\ntest_size = 12\nprobe_steps = 10\nfinetune_steps = 2\n"
        "depth_train_size = 4\ndepth_test_size = 2\ndepth_steps = 2\nbatch_size = 4\n")


@pytest.fixture
def rp_config(tmp_path):
    path = tmp_path / "rp.ini"
    path.write_text(toy_text(("rp",), steps=6) + EVAL)
    return path


def test_metrics_line_format_and_round_trip(tmp_path):
    rec = MetricsRecord(2.5, "x", "eval", {"b": 1, "a": [1.0, 2.0]})
    assert rec.to_line() == '{"timestamp":2.5,"experiment-id":"x","kind":"eval","payload":{"a":[1.0,2.0],"b":1}}'
    assert MetricsRecord.from_line(rec.to_line()) == rec
    path = tmp_path / "m.jsonl"
    append_records(path, [rec])
    append_records(path, [rec])
    assert read_records(path) == [rec, rec]
    with pytest.raises(ValueError):
        MetricsRecord.from_line('{"kind":"x","timestamp":0,"experiment-id":"e","payload":{}}')


def test_pretrain_eval_report_pipeline(tmp_path, rp_config):
    out = tmp_path / "run"
    assert main(["pretrain", "--config", str(rp_config), "--out", str(out)]) == 0
    ckpts = sorted(out.glob("ckpt_*.mtss"))
    assert len(ckpts) >= 2 and not (out / "INCOMPLETE").exists()
    assert read_checkpoint(ckpts[-1]).meta["steps"] == 6
    assert main(["eval", "--config", str(rp_config), "--out", str(out)]) == 0
    recs = read_records(out / "metrics.jsonl")
    evals = [r for r in recs if r.kind == "eval"]
    assert {r.payload["checkpoint"] for r in evals} == {p.name for p in ckpts}
    assert {r.payload["evaluation"] for r in evals} == {"frozen_linear", "finetune", "depth"}
    assert {r.kind for r in recs} >= {"train", "staleness", "eval"}
    assert main(["report", "--out", str(tmp_path / "rep"), str(out)]) == 0
    table = (tmp_path / "rep" / "report.md").read_text()
    assert "| toy |" in table
    curves = (tmp_path / "rep" / "curves.csv").read_text().splitlines()
    assert curves[0] == "experiment-id,cost,evaluation,value" and len(curves) == 1 + len(evals)


def test_rerun_is_byte_identical(tmp_path, rp_config):
    dirs = [tmp_path / "a", tmp_path / "b"]
    for d in dirs:
        assert main(["pretrain", "--config", str(rp_config), "--out", str(d)]) == 0
    names = sorted(p.name for p in dirs[0].iterdir())
    assert names == sorted(p.name for p in dirs[1].iterdir())
    for n in names:
        assert (dirs[0] / n).read_bytes() == (dirs[1] / n).read_bytes(), n


def test_seed_flag_overrides(tmp_path, rp_config):
    main(["pretrain", "--config", str(rp_config), "--out", str(tmp_path / "a")])
    main(["pretrain", "--config", str(rp_config), "--out", str(tmp_path / "b"), "--seed", "5"])
    assert (tmp_path / "a" / "ckpt_000.mtss").read_bytes() != (tmp_path / "b" / "ckpt_000.mtss").read_bytes()
    assert read_checkpoint(tmp_path / "b" / "ckpt_000.mtss").meta["seed"] == 5


def test_simulate_schedule_async_emits_staleness(tmp_path, capsys):
    path = tmp_path / "c.ini"
    path.write_text(toy_text(("rp",), steps=6, task_extra="workers = 2\nslow_workers = 1\nslow_factor = 3.5\n"))
    assert main(["simulate-schedule", "--config", str(path), "--mode", "async"]) == 0
    lines = [MetricsRecord.from_line(line) for line in capsys.readouterr().out.splitlines()]
    assert [r.kind for r in lines] == ["staleness"]
    assert lines[0].payload["mode"] == "async" and lines[0].payload["max-staleness"] >= 1


def test_error_exit_codes(tmp_path):
    bad = tmp_path / "bad.ini"
    bad.write_text(toy_text(("rp",)) + "foo = 1\n")
    assert main(["pretrain", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert main(["pretrain", "--config", str(tmp_path / "missing.ini"), "--out", str(tmp_path / "o")]) == 1
    empty = tmp_path / "empty"
    empty.mkdir()
    good = tmp_path / "good.ini"
    good.write_text(toy_text(("rp",)))
    assert main(["eval", "--config", str(good), "--out", str(empty)]) == 1
    (empty / "ckpt_000.mtss").write_bytes(b"MTSS\x01\x00")
    assert main(["eval", "--config", str(good), "--out", str(empty)]) == 1
    # the failed eval leaves its marker behind
    assert (empty / "INCOMPLETE").exists()


def test_console_entry_point(tmp_path):
    bad = tmp_path / "bad.ini"
    bad.write_text("[experiment]\nid = x\n")
    proc = subprocess.run([sys.executable, "-m", "mtss.cli", "simulate-schedule", "--config", str(bad)],
                          capture_output=True, text=True)
    assert proc.returncode == 2 and "seed" in proc.stderr


def test_parallel_evals_match_sequential(tmp_path, rp_config):
    for name, jobs in (("seq", "1"), ("par", "2")):
        out = tmp_path / name
        main(["pretrain", "--config", str(rp_config), "--out", str(out)])
        assert main(["eval", "--config", str(rp_config), "--out", str(out), "--parallel-evals", jobs]) == 0
    assert (tmp_path / "seq" / "metrics.jsonl").read_bytes() == (tmp_path / "par" / "metrics.jsonl").read_bytes()


def test_precision_env_overrides_config(tmp_path, rp_config, monkeypatch):
    explicit = tmp_path / "p32.ini"
    explicit.write_text(rp_config.read_text().replace("[experiment]\n", "[experiment]\nprecision = 32\n"))
    assert main(["pretrain", "--config", str(explicit), "--out", str(tmp_path / "cfg")]) == 0
    monkeypatch.setenv("MTSS_PRECISION", "32")
    assert main(["pretrain", "--config", str(rp_config), "--out", str(tmp_path / "env")]) == 0
    a, b = (read_checkpoint(tmp_path / d / "ckpt_001.mtss") for d in ("cfg", "env"))
    assert all(a.params[k].tobytes() == b.params[k].tobytes() for k in a.params)
    monkeypatch.delenv("MTSS_PRECISION")
    assert main(["pretrain", "--config", str(rp_config), "--out", str(tmp_path / "f64")]) == 0
    c = read_checkpoint(tmp_path / "f64" / "ckpt_001.mtss")
    assert any(a.params[k].tobytes() != c.params[k].tobytes() for k in a.params)
    monkeypatch.setenv("MTSS_PRECISION", "16")
    assert main(["pretrain", "--config", str(rp_config), "--out", str(tmp_path / "bad")]) == 2
