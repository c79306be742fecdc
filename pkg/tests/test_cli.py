import json
import time

import pytest

from hgen.cli import RunConfig, UsageError, main
from hgen.hetgraph import load_heterograph

SMOKE_SPEC = {"num_target_nodes": 60, "num_features": 6, "aux_sizes": {"a": 12, "b": 9},
              "p_intra": {"a": 0.3, "b": 0.3}, "p_inter": {"a": 0.03, "b": 0.05}}


@pytest.fixture
def smoke(tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps(SMOKE_SPEC))
    graph = tmp_path / "graph.json"
    assert main(["synth", "--config", str(spec), "--out", str(graph), "--seed", "1"]) == 0
    config = tmp_path / "run.json"
    config.write_text(json.dumps({"graph": str(graph), "hidden_dim": 8, "attention_dim": 4, "k": 2,
                                  "max_epochs": 40, "patience": 10}))
    return tmp_path, graph, config


def test_synth_default_and_reproducible(tmp_path, capsys):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    assert main(["synth", "--out", str(a), "--seed", "3"]) == 0
    assert main(["synth", "--out", str(b), "--seed", "3"]) == 0
    assert a.read_bytes() == b.read_bytes()
    g = load_heterograph(a)
    assert g.n == 600 and len(g.meta_paths) == 3
    summary = json.loads(capsys.readouterr().out.splitlines()[0])
    assert summary["n"] == 600 and summary["q"] == 3 and "edge_counts" in summary


def test_synth_invalid_spec(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"num_classes": 1}))
    assert main(["synth", "--config", str(bad), "--out", str(tmp_path / "g.json")]) == 2
    assert "invalid" in capsys.readouterr().err
    bad.write_text(json.dumps({"colour": "red"}))
    assert main(["synth", "--config", str(bad), "--out", str(tmp_path / "g.json")]) == 2


def test_config_unknown_key_and_types():
    with pytest.raises(UsageError, match="unknown"):
        RunConfig.from_dict({"learning_rate": 0.1})
    with pytest.raises(UsageError):
        RunConfig.from_dict({"k": "three"})
    with pytest.raises(UsageError):
        RunConfig.from_dict({"k": 2.5})
    with pytest.raises(UsageError):
        RunConfig.from_dict({"feature_drop": 1})
    assert RunConfig.from_dict({"lr": 1}).lr == 1.0
    assert RunConfig.from_dict({}) == RunConfig()


def test_usage_errors(tmp_path, smoke):
    _, graph, config = smoke
    assert main(["train"]) == 2  # no graph
    assert main(["train", "--graph", str(tmp_path / "missing.json")]) == 2
    assert main(["train", "--config", str(config), "--mode", "boosting"]) == 2
    assert main(["train", "--config", str(config), "--edge-drop", "1.5"]) == 2
    assert main(["frobnicate"]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"graph": str(graph), "epochs": 3}))
    assert main(["train", "--config", str(bad)]) == 2


def test_train_smoke_and_eval(smoke, capsys):
    root, graph, config = smoke
    out = root / "run"
    t0 = time.perf_counter()
    assert main(["train", "--config", str(config), "--out", str(out), "--mode", "naive_weighting"]) == 0
    assert time.perf_counter() - t0 < 60
    for name in ("checkpoint_seed0.json", "history_seed0.json", "report_seed0.json", "timing_seed0.json"):
        assert (out / name).exists()
    report = json.loads((out / "report_seed0.json").read_text())
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(out / "checkpoint_seed0.json"), "--graph", str(graph)]) == 0
    printed = json.loads(capsys.readouterr().out)
    assert printed == report
    assert len(printed["solo_accuracies"]) == 2
    assert json.loads((out / "checkpoint_seed0.eval.json").read_text()) == report


def test_eval_rejects_bad_checkpoints(smoke, capsys):
    root, graph, config = smoke
    out = root / "run"
    assert main(["train", "--config", str(config), "--out", str(out), "--seed", "2"]) == 0
    ck = out / "checkpoint_seed2.json"
    corrupt = root / "corrupt.json"
    corrupt.write_text(ck.read_text().replace('"data": "', '"data": "AAAA', 1))
    assert main(["eval", "--checkpoint", str(corrupt), "--graph", str(graph)]) == 1
    other = root / "other.json"
    assert main(["synth", "--out", str(other), "--seed", "0"]) == 0
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(ck), "--graph", str(other)]) == 1
    assert "features" in capsys.readouterr().err
    assert main(["eval", "--checkpoint", str(root / "nope.json"), "--graph", str(graph)]) == 2


def test_seed_list_writes_aggregate(smoke):
    root, _, config = smoke
    out = root / "seeds"
    assert main(["train", "--config", str(config), "--out", str(out), "--seeds", "0,1,2,3,4",
                 "--no-feature-drop", "--no-regularizer", "--lambda", "0.2", "--backbone", "sage"]) == 0
    assert len(list(out.glob("report_seed*.json"))) == 5
    agg = json.loads((out / "aggregate.json").read_text())
    assert agg["seeds"] == [0, 1, 2, 3, 4] and "accuracy_std" in agg
    cfg = json.loads((out / "config.json").read_text())
    assert cfg["backbone"] == "sage" and cfg["regularizer"] is False and cfg["feature_drop"] is False
    assert cfg["lam"] == 0.2


def test_train_is_deterministic_except_timing(smoke):
    root, _, config = smoke
    outs = [root / "a", root / "b"]
    for out in outs:
        assert main(["train", "--config", str(config), "--out", str(out), "--edge-drop", "0.1"]) == 0
    for name in ("checkpoint_seed0.json", "history_seed0.json", "report_seed0.json"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()


def test_bench_tables(smoke):
    root, _, config = smoke
    out = root / "bench"
    assert main(["bench", "--config", str(config), "--out", str(out), "--ks", "1,2,3,4", "--lambdas", "0,0.5",
                 "--seeds", "0,1"]) == 0
    runtime = (out / "runtime.csv").read_text().splitlines()
    assert runtime[0] == "k,mean_epoch_seconds" and len(runtime) == 5
    assert "r2" in json.loads((out / "runtime_fit.json").read_text())
    stats = json.loads((out / "lambda_stats.json").read_text())
    assert set(stats) == {"0.0", "0.5"} and len(stats["0.5"]["spreads"]) == 2
    rows = (out / "lambda_sweep.csv").read_text().splitlines()
    assert rows[0] == "lambda,seed,metapath,solo_accuracy" and len(rows) == 1 + 2 * 2 * 2
    allele = json.loads((out / "allele_stats.json").read_text())
    assert set(allele) == {"hgen", "naive_weighting", "hard_voting"}


def test_bench_empty_sweep_is_usage_error(smoke):
    root, _, config = smoke
    assert main(["bench", "--config", str(config), "--out", str(root / "b"), "--ks", ""]) == 2
    assert main(["bench", "--config", str(config), "--out", str(root / "b"), "--only", "violins"]) == 2
