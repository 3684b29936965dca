import argparse
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from config import (
    FIELD_TYPES, ExperimentConfig, get_config_summary, load_config, parse_value, set_scale, thread_cap,
)
from data_loader import load_dataset
from encoder import learnable_count
from errors import ConfigError, OclError
from ndgrad import grad_check_report
from prng import Xoshiro256, derive_seed
from reporting import format_aggregate, write_csv, write_run_artifacts, write_seed_artifacts
from stream import Minibatch, scenario_frame, si_blurry_split
from trainer import batch_loss, build_run, run_stream
from weights import inspect_weights, load_encoder

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_USAGE = 2

GRAD_CHECK_BATCH = 4
GRAD_CHECK_STEP = 1e-3
GRAD_CHECK_TOLERANCE = 1e-4


def _run_seed(cfg: ExperimentConfig, seed: int, encoder, out_dir: str):
    result = run_stream(cfg, seed, encoder)
    write_seed_artifacts(result, out_dir, cfg.num_tasks)
    return result


def run_experiment(cfg: ExperimentConfig, out_dir: Optional[str] = None, threads: Optional[int] = None) -> int:
    """
    Runs every seed (in parallel up to `threads`), writes per-seed CSVs, then
    the top-level metrics.csv and aggregate.csv. A failing seed is reported and
    skipped; the status is nonzero if any seed failed.
    """
    out_dir = out_dir or cfg.output_dir
    threads = threads or thread_cap()
    os.makedirs(out_dir, exist_ok=True)
    encoder = load_encoder(cfg)

    if not cfg.quiet:
        print("\n=== EXPERIMENT ===")
        print(get_config_summary(cfg))

    results = {}
    failures = {}
    with ThreadPoolExecutor(max_workers=max(1, min(threads, len(cfg.seeds)))) as pool:
        futures = {seed: pool.submit(_run_seed, cfg, seed, encoder, out_dir) for seed in cfg.seeds}
        for seed, future in futures.items():
            try:
                results[seed] = future.result()
            except (OclError, OSError) as e:
                failures[seed] = e
                print(f"❌ Seed {seed} failed: {e}")

    ordered = [results[s] for s in cfg.seeds if s in results]
    aggregate = write_run_artifacts(ordered, out_dir)
    if not cfg.quiet and len(aggregate):
        print("\n=== RESULTS (mean ± std over seeds, %) ===")
        print(format_aggregate(aggregate))
        print(f"📁 Artifacts written to {out_dir}")
    return EXIT_FAILED if failures else EXIT_OK


def dump_scenario(cfg: ExperimentConfig, seed: int) -> pd.DataFrame:
    """Scenario rows for the full dataset of one seed (no holdout split)"""
    dataset = load_dataset(cfg, derive_seed(seed, "data"), verbose=False)
    return scenario_frame(si_blurry_split(cfg.scenario(seed), dataset.labels))


def grad_check_model(cfg: ExperimentConfig, seed: int = 0, batch_size: int = GRAD_CHECK_BATCH) -> Dict[str, float]:
    """Finite-difference check of every learnable adapter and head parameter on one small batch"""
    cfg.validate()
    run = build_run(cfg, seed)
    dataset = load_dataset(cfg, derive_seed(seed, "data"), verbose=False)
    rng = Xoshiro256(derive_seed(seed, "grad-check"))
    idx = np.array(rng.sample(len(dataset), min(batch_size, len(dataset))), dtype=np.int64)
    if idx.size == 0:
        raise ConfigError("grad-check needs at least one sample", key="samples_per_class")
    batch = Minibatch(dataset.inputs[idx], dataset.labels[idx], ["stream"] * idx.size)
    selection_seed = derive_seed(seed, "grad-check-selection")

    def loss_fn(tape):
        return batch_loss(run, tape, batch, Xoshiro256(selection_seed))[0]

    return grad_check_report(loss_fn, run.learnable(), GRAD_CHECK_STEP)


def run_sweep(cfg: ExperimentConfig, key: str, values: Sequence[str], out_dir: str) -> pd.DataFrame:
    """One experiment per value of `key`; rows key,value,metric,mean,std,params"""
    if key not in FIELD_TYPES or key in ("seeds", "output_dir"):
        raise ConfigError("cannot sweep this key", key=key)
    rows = []
    for raw in values:
        value = parse_value(key, raw)
        variant = replace(cfg, **{key: value})
        variant.seeds = list(cfg.seeds)
        if key == "scale":
            set_scale(variant, value)
        variant.validate()
        target = os.path.join(out_dir, f"{key}={raw}")
        if not cfg.quiet:
            print(f"\n🧪 Sweep {key} = {raw}")
        status = run_experiment(variant, target)
        if status != EXIT_OK:
            raise ConfigError(f"sweep point {raw} had failing seeds", key=key)
        aggregate = pd.read_csv(os.path.join(target, "aggregate.csv"))
        params = _param_count(variant)
        for _, row in aggregate.iterrows():
            rows.append({"key": key, "value": raw, "metric": row["metric"],
                         "mean": float(row["mean"]), "std": float(row["std"]), "params": params})
    sweep = pd.DataFrame(rows, columns=["key", "value", "metric", "mean", "std", "params"])
    write_csv(sweep, os.path.join(out_dir, "sweep.csv"))
    return sweep


def _param_count(cfg: ExperimentConfig) -> int:
    return learnable_count(build_run(cfg, cfg.seeds[0]).learnable())


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="oclbench", description="Online continual learning with prefix prompts")
    sub = p.add_subparsers(dest="cmd", required=True)

    run = sub.add_parser("run", help="run every seed of a config and write CSV artifacts")
    run.add_argument("--config", required=True)
    run.add_argument("--out", default=None, help="output directory (overrides output_dir)")

    dump = sub.add_parser("dump-scenario", help="write the Si-Blurry assignment of one seed as CSV")
    dump.add_argument("--config", required=True)
    dump.add_argument("--seed", type=int, default=None, help="defaults to the first configured seed")
    dump.add_argument("--out", default=None, help="CSV path (stdout when omitted)")

    inspect = sub.add_parser("inspect-weights", help="list the tensor table of an OCLW1 weight file")
    inspect.add_argument("path")

    grad = sub.add_parser("grad-check", help="finite-difference check of the configured model")
    grad.add_argument("--config", required=True)
    grad.add_argument("--seed", type=int, default=0)

    sweep = sub.add_parser("sweep", help="repeat the experiment over values of one config key")
    sweep.add_argument("--config", required=True)
    sweep.add_argument("--key", required=True)
    sweep.add_argument("--values", required=True, help="comma separated, e.g. true,false")
    sweep.add_argument("--out", default=None)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE

    try:
        if args.cmd == "inspect-weights":
            table = inspect_weights(args.path)
            print(table.to_string(index=False))
            return EXIT_OK

        cfg = load_config(args.config)
        if args.cmd == "run":
            return run_experiment(cfg, args.out)

        if args.cmd == "dump-scenario":
            seed = cfg.seeds[0] if args.seed is None else args.seed
            frame = dump_scenario(cfg, seed)
            if args.out:
                write_csv(frame, args.out)
                print(f"✅ Wrote {len(frame)} rows to {args.out}")
            else:
                frame.to_csv(sys.stdout, index=False, lineterminator="\n")
            return EXIT_OK

        if args.cmd == "grad-check":
            report = grad_check_model(cfg, args.seed)
            print("\n=== GRADIENT CHECK ===")
            for name, err in report.items():
                flag = "✅" if err <= GRAD_CHECK_TOLERANCE else "❌"
                print(f"  {flag} {name:<24} max rel err {err:.3e}")
            worst = max(report.values()) if report else 0.0
            return EXIT_OK if worst <= GRAD_CHECK_TOLERANCE else EXIT_FAILED

        if args.cmd == "sweep":
            values = [v.strip() for v in args.values.split(",") if v.strip()]
            run_sweep(cfg, args.key, values, args.out or cfg.output_dir)
            return EXIT_OK
    except (OclError, OSError) as e:
        print(f"❌ {e}")
        return EXIT_FAILED
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
