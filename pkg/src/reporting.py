import os
from typing import List

import pandas as pd

from metrics import aggregate_frame, metric_frame
from promptsel import (
    default_prompt_task_map, histogram_frame, key_similarity_stats, selection_histogram, task_id_accuracy,
)
from stream import scenario_frame


def write_csv(df: pd.DataFrame, path: str) -> str:
    """Header row, no index, LF line endings; floats use Python's shortest round-trip repr"""
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    df.to_csv(path, index=False, lineterminator="\n")
    return path


def seed_dir(out_dir: str, seed: int) -> str:
    return os.path.join(out_dir, f"seed_{seed}")


def write_seed_artifacts(result, out_dir: str, num_tasks: int) -> List[str]:
    """Every per-seed CSV; the three selection analytics only exist for prompt pools"""
    target = seed_dir(out_dir, result.seed)
    written = [
        write_csv(metric_frame(result.seed, result.metrics), os.path.join(target, "metrics.csv")),
        write_csv(result.anytime.frame(), os.path.join(target, "anytime.csv")),
        write_csv(result.matrix.frame(), os.path.join(target, "accuracy_matrix.csv")),
        write_csv(scenario_frame(result.assignment), os.path.join(target, "scenario.csv")),
        write_csv(pd.DataFrame(result.norm_rows, columns=["step", "class_id", "first_seen_step", "norm"]),
                  os.path.join(target, "norms.csv")),
    ]

    run = result.run
    if run.adapter_kind == "pool":
        pool = run.adapter
        log = result.inference_log
        hist = selection_histogram(log, run.num_classes, pool.size)
        prompt_task = default_prompt_task_map(pool.size, num_tasks)
        written.append(write_csv(histogram_frame(hist), os.path.join(target, "selection_histogram.csv")))
        written.append(write_csv(task_id_accuracy(log, prompt_task, run.num_classes),
                                 os.path.join(target, "task_id_accuracy.csv")))
        written.append(write_csv(key_similarity_stats(run.selection_log), os.path.join(target, "key_similarity.csv")))
    return written


def combine_metrics(results) -> pd.DataFrame:
    frames = [metric_frame(r.seed, r.metrics) for r in results]
    if not frames:
        return pd.DataFrame(columns=["seed", "metric", "value"])
    return pd.concat(frames, ignore_index=True)


def write_run_artifacts(results, out_dir: str) -> pd.DataFrame:
    """Top-level metrics.csv and aggregate.csv; returns the aggregate table"""
    per_seed = combine_metrics(results)
    aggregate = aggregate_frame(per_seed) if len(per_seed) else pd.DataFrame(columns=["metric", "mean", "std"])
    write_csv(per_seed, os.path.join(out_dir, "metrics.csv"))
    write_csv(aggregate, os.path.join(out_dir, "aggregate.csv"))
    return aggregate


def format_aggregate(aggregate: pd.DataFrame) -> str:
    """Console table in percent, mean ± std"""
    lines = []
    for _, row in aggregate.iterrows():
        lines.append(f"  {row['metric']:<7} {100 * row['mean']:6.2f} ± {100 * row['std']:5.2f}")
    return "\n".join(lines)
