import csv
import json
import logging

import numpy as np
import pytest

from laghawkes.cli import main, preset_params
from laghawkes.core import CausalGraph, EventSequence, ModelParams, read_sequences, write_params, write_sequences
from laghawkes.identify import rmse
from laghawkes.infer.fit import FitResult, save_fit
from laghawkes.simulate import simulate_batch

FAST = ["--iterations", "150", "--eval-every", "10", "--step-size", "0.05"]


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    return tmp_path


def _run(*args):
    return main([str(a) for a in args])


def test_simulate_is_deterministic_and_round_trips(workdir):
    args = ["simulate", "--preset", "u3", "--num-seq", "20", "--horizon", "30", "--seed", "5"]
    assert _run(*args, "--data", "a.jsonl", "--truth", "ta.json") == 0
    assert _run(*args, "--data", "b.jsonl", "--truth", "tb.json") == 0
    assert (workdir / "a.jsonl").read_bytes() == (workdir / "b.jsonl").read_bytes()
    assert (workdir / "ta.json").read_bytes() == (workdir / "tb.json").read_bytes()
    p, g, _, _ = preset_params("u3")
    assert read_sequences("a.jsonl") == simulate_batch(p, g, 20, 30.0, 5)


def test_benchmark_preset_scale():
    p, g, n, _ = preset_params("benchmark")
    assert p.U == 10 and n == 2000
    assert not g.adjacency.all()


def test_tiny_horizon_gives_valid_empty_line(workdir):
    p = ModelParams(np.array([1e-3]), np.zeros((1, 1)), np.ones((1, 1)), np.zeros((1, 1)))
    write_params("p.json", p)
    assert _run("simulate", "--params", "p.json", "--num-seq", 1, "--horizon", 0.001,
                "--data", "s.jsonl", "--truth", "t.json") == 0
    (seq,) = read_sequences("s.jsonl")
    assert len(seq) == 0 and seq.T == 0.001


def test_require_stationary(workdir):
    p = ModelParams(np.array([0.1]), np.array([[1.2]]), np.ones((1, 1)), np.zeros((1, 1)))
    write_params("p.json", p)
    base = ["simulate", "--params", "p.json", "--num-seq", 1, "--horizon", 1.0, "--data", "s.jsonl",
            "--truth", "t.json"]
    assert _run(*base) == 0
    assert _run(*base, "--require-stationary") == 1


def test_missing_data_file_exits_2(workdir, caplog):
    with caplog.at_level(logging.ERROR):
        assert _run("fit", "--data", "nope.jsonl", "--fit", "f.json") == 2
    assert "nope.jsonl" in caplog.text


def test_bad_config_exits_2(workdir):
    (workdir / "c.json").write_text('{"backend": "mle",\n "bogus": 1}')
    assert _run("fit", "--config", "c.json") == 2
    (workdir / "c.json").write_text('{"backend": ')
    assert _run("fit", "--config", "c.json") == 2
    assert _run("fit", "--backend", "nope", "--data", "x", "--fit", "y") == 2


def test_parse_error_names_line(workdir, caplog):
    (workdir / "s.jsonl").write_text('{"seq_id":"a","T":1,"U":1,"events":[]}\n{"T": 1}\n')
    with caplog.at_level(logging.ERROR):
        assert _run("fit", "--data", "s.jsonl", "--fit", "f.json") == 2
    assert "s.jsonl:2" in caplog.text


def test_fit_predict_eval_pipeline(workdir):
    cfg = {"preset": "u3", "num_seq": 30, "horizon": 40, "data": "s.jsonl", "truth": "t.json",
           "fit": "f.json", "out": "pred.csv", "n_samples": 10, "dims": [0, 2], "seed": 2,
           "iterations": 300, "eval_every": 10, "step_size": 0.05}
    (workdir / "c.json").write_text(json.dumps(cfg))
    assert _run("simulate", "--config", "c.json") == 0
    code = _run("fit", "--config", "c.json")
    assert code in (0, 1)
    first = (workdir / "f.json").read_bytes()
    assert _run("fit", "--config", "c.json") == code
    assert (workdir / "f.json").read_bytes() == first
    log_rows = list(csv.reader(open("f.json.log.csv")))
    assert log_rows[0] == ["iteration", "objective"] and len(log_rows) > 2
    assert _run("predict", "--config", "c.json") == 0
    rows = list(csv.DictReader(open("pred.csv")))
    assert len(rows) == 6 * 2
    assert list(rows[0]) == ["seq_id", "dim", "predicted_t", "actual_t"]
    pred_bytes = (workdir / "pred.csv").read_bytes()
    assert _run("predict", "--config", "c.json") == 0
    assert (workdir / "pred.csv").read_bytes() == pred_bytes
    assert _run("eval", "--config", "c.json", "--predictions", "pred.csv", "--out", "m.json") == 0
    m = json.load(open("m.json"))
    assert set(m["abs_error_rate"]) == {"mu", "A", "beta", "delta"}
    p = np.array([float(r["predicted_t"]) for r in rows])
    a = np.array([float(r["actual_t"]) for r in rows])
    assert m["rmse"] == pytest.approx(rmse(p, a))


def test_eval_truth_against_truth_is_zero(workdir):
    p, g, _, _ = preset_params("u3")
    write_params("t.json", p, g)
    save_fit("f.json", FitResult("mle", p, g, None, [], 0.0, True))
    assert _run("eval", "--fit", "f.json", "--truth", "t.json", "--out", "m.json") == 0
    m = json.load(open("m.json"))
    assert m["abs_error_rate"] == {"mu": 0.0, "A": 0.0, "beta": 0.0, "delta": 0.0}
    assert _run("eval", "--fit", "f.json", "--out", "m.json") == 2


def test_vae_ablation_switch(workdir):
    base = ["--preset", "two_lag", "--num-seq", "10", "--horizon", "40", "--data", "s.jsonl",
            "--truth", "t.json", "--backend", "vae", "--d-model", "4", "--batch-size", "4"]
    assert _run("simulate", *base) == 0
    assert _run("fit", *base, *FAST, "--fit", "full.json") in (0, 1)
    assert _run("fit", *base, *FAST, "--no-embeddings", "--fit", "b.json") in (0, 1)
    enc = json.load(open("b.json"))["encoder"]
    assert enc["use_time"] is False and enc["use_type"] is False
    assert json.load(open("full.json"))["encoder"]["use_time"] is True


def test_threads_env_fallback(workdir, monkeypatch):
    monkeypatch.setenv("LAGHAWKES_THREADS", "x")
    assert _run("simulate", "--num-seq", 1, "--horizon", 1, "--data", "s.jsonl", "--truth", "t.json") == 2
    monkeypatch.setenv("LAGHAWKES_THREADS", "1")
    assert _run("simulate", "--num-seq", 1, "--horizon", 1, "--data", "s.jsonl", "--truth", "t.json") == 0


def test_recover_reports_exact_pairs(workdir):
    p, g, _, _ = preset_params("u3")
    write_params("t.json", p, g)
    assert _run("recover", "--truth", "t.json", "--out", "r.json", "--horizon", "60", "--seed", "3") == 0
    r = json.load(open("r.json"))
    assert r["mu"]["status"] == "exact"
    assert r["summary"] == {"exact": int(g.adjacency.sum()), "ambiguous": 0, "failed": 0}
    assert {(e["u"], e["v"]) for e in r["pairs"]} == set(g.pairs())


def test_recover_flags_collision(workdir):
    g = CausalGraph([[False] * 3, [False] * 3, [True, True, False]])
    p = ModelParams(np.full(3, 0.1), np.where(g.adjacency, 0.5, 0.0), np.ones((3, 3)),
                    np.where(g.adjacency, 2.0, 0.0))
    write_params("t.json", p, g)
    write_sequences("s.jsonl", [EventSequence([1.0, 2.0], [0, 1], 10.0, 3, "c")])
    assert _run("recover", "--truth", "t.json", "--data", "s.jsonl", "--out", "r.json") == 0
    r = json.load(open("r.json"))
    assert {e["status"] for e in r["pairs"]} == {"ambiguous"}


def test_default_on_switches_have_negations():
    from laghawkes.cli import build_parser, load_config

    cfg = load_config(build_parser().parse_args(["fit", "--no-monotone", "--no-learn-scale"]))
    assert cfg.train.monotone is False and cfg.train.learn_scale is False
    cfg = load_config(build_parser().parse_args(["fit"]))
    assert cfg.train.monotone is True and cfg.train.learn_scale is True
