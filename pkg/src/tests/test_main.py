#!/usr/bin/env python3
"""
End-to-end command tests: run, dump-scenario, inspect-weights, grad-check and sweep.
"""

import os
import sys
sys.path.insert(0, os.path.join(os.path.dirname(os.path.abspath(__file__)), ".."))

import numpy as np
import pandas as pd

from config import parse_config
from main import EXIT_FAILED, EXIT_OK, EXIT_USAGE, dump_scenario, main, run_experiment
from ndgrad import Tensor
from weights import write_weights

TOY = """
samples_per_class = 20
eval_interval = 50
seeds = 1, 2
quiet = true
"""


def _config_file(tmp_path, extra=""):
    path = tmp_path / "toy.cfg"
    path.write_text(TOY + extra)
    return str(path)


def _artifacts(out_dir):
    found = {}
    for root, _, files in os.walk(out_dir):
        for name in files:
            full = os.path.join(root, name)
            found[os.path.relpath(full, out_dir)] = open(full, "rb").read()
    return found


def test_run_writes_aggregate_and_is_reproducible(tmp_path):
    cfg_path = _config_file(tmp_path)
    first = str(tmp_path / "first" / "nested")
    assert main(["run", "--config", cfg_path, "--out", first]) == EXIT_OK
    aggregate = pd.read_csv(os.path.join(first, "aggregate.csv"))
    assert list(aggregate.columns) == ["metric", "mean", "std"]
    assert set(aggregate["metric"]) == {"A_auc", "A_last", "F_last"}
    per_seed = pd.read_csv(os.path.join(first, "metrics.csv"))
    assert sorted(set(per_seed["seed"])) == [1, 2]
    for seed in (1, 2):
        for name in ("metrics.csv", "anytime.csv", "accuracy_matrix.csv", "scenario.csv", "norms.csv"):
            assert os.path.exists(os.path.join(first, f"seed_{seed}", name))

    second = str(tmp_path / "second")
    assert main(["run", "--config", cfg_path, "--out", second]) == EXIT_OK
    assert _artifacts(first) == _artifacts(second)
    assert b"\r\n" not in _artifacts(first)["aggregate.csv"]


def test_threaded_run_matches_sequential(tmp_path):
    cfg = parse_config(TOY)
    run_experiment(cfg, str(tmp_path / "one"), threads=1)
    run_experiment(cfg, str(tmp_path / "two"), threads=2)
    assert _artifacts(str(tmp_path / "one")) == _artifacts(str(tmp_path / "two"))


def test_pool_run_writes_selection_analytics(tmp_path):
    cfg_path = _config_file(tmp_path, "adapter = pool\npool_size = 4\nseeds = 1\n")
    out = str(tmp_path / "pool")
    assert main(["run", "--config", cfg_path, "--out", out]) == EXIT_OK
    for name in ("selection_histogram.csv", "task_id_accuracy.csv", "key_similarity.csv"):
        assert os.path.exists(os.path.join(out, "seed_1", name))
    hist = pd.read_csv(os.path.join(out, "seed_1", "selection_histogram.csv"))
    assert hist["count"].sum() == 10 * 4


def test_dump_scenario_covers_whole_dataset(tmp_path):
    cfg = parse_config(TOY)
    frame = dump_scenario(cfg, 1)
    assert len(frame) == 10 * 20
    out = str(tmp_path / "scenario.csv")
    assert main(["dump-scenario", "--config", _config_file(tmp_path), "--seed", "1", "--out", out]) == EXIT_OK
    assert len(pd.read_csv(out)) == 200


def test_inspect_weights_command(tmp_path, capsys):
    path = str(tmp_path / "w.oclw")
    write_weights(path, {"a": Tensor(np.zeros((2, 2))), "b": Tensor(np.ones(3))})
    assert main(["inspect-weights", path]) == EXIT_OK
    printed = capsys.readouterr().out
    assert "2x2" in printed and "b" in printed
    bad = tmp_path / "bad.oclw"
    bad.write_bytes(b"nope")
    assert main(["inspect-weights", str(bad)]) == EXIT_FAILED


def test_usage_and_config_errors(tmp_path):
    assert main([]) == EXIT_USAGE
    assert main(["run"]) == EXIT_USAGE
    assert main(["frobnicate"]) == EXIT_USAGE
    assert main(["run", "--config", str(tmp_path / "missing.cfg")]) == EXIT_FAILED
    broken = tmp_path / "broken.cfg"
    broken.write_text("disjoint_ratio = 2\n")
    assert main(["run", "--config", str(broken)]) == EXIT_FAILED


def test_grad_check_command(tmp_path):
    cfg_path = _config_file(tmp_path, "samples_per_class = 4\n")
    assert main(["grad-check", "--config", cfg_path]) == EXIT_OK


def test_sweep_writes_table(tmp_path):
    cfg_path = _config_file(tmp_path, "seeds = 1\n")
    out = str(tmp_path / "sweep")
    assert main(["sweep", "--config", cfg_path, "--key", "masking", "--values", "true,false", "--out", out]) == EXIT_OK
    sweep = pd.read_csv(os.path.join(out, "sweep.csv"))
    assert list(sweep.columns) == ["key", "value", "metric", "mean", "std", "params"]
    assert len(sweep) == 2 * 3
    assert os.path.exists(os.path.join(out, "masking=false", "aggregate.csv"))
    assert main(["sweep", "--config", cfg_path, "--key", "seeds", "--values", "1", "--out", out]) == EXIT_FAILED


if __name__ == "__main__":
    import tempfile
    from pathlib import Path
    for name, fn in list(globals().items()):
        if name.startswith("test_") and callable(fn) and fn.__code__.co_argcount == 1:
            with tempfile.TemporaryDirectory() as tmp:
                fn(Path(tmp))
            print(f"✅ {name}")
