"""
Stream metrics: A_last, F_last, A_auc and multi-seed aggregation.

Task columns that own no test class are stored as NaN and skipped.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np
import pandas as pd

from errors import ContractError


class AccuracyMatrix:
    """a[t][i]: accuracy on task i's classes after training through task t (i <= t)"""

    def __init__(self, num_tasks: int):
        self.num_tasks = num_tasks
        self.a = np.full((num_tasks, num_tasks), np.nan)
        self.rows_done = 0

    @classmethod
    def from_rows(cls, rows: Sequence[Sequence[float]]) -> "AccuracyMatrix":
        matrix = cls(len(rows))
        for t, row in enumerate(rows):
            matrix.record(t, list(row)[: t + 1])
        return matrix

    def record(self, t: int, accuracies: Sequence[float]):
        if len(accuracies) != t + 1:
            raise ContractError(f"row {t} needs {t + 1} entries, got {len(accuracies)}")
        for i, value in enumerate(accuracies):
            if value is not None and not np.isnan(value) and not 0.0 <= value <= 1.0:
                raise ContractError(f"accuracy {value} outside [0, 1]")
            self.a[t, i] = np.nan if value is None else value
        self.rows_done = max(self.rows_done, t + 1)

    def frame(self) -> pd.DataFrame:
        rows = [
            {"trained_task": t, "eval_task": i, "accuracy": float(self.a[t, i])}
            for t in range(self.rows_done)
            for i in range(t + 1)
            if not np.isnan(self.a[t, i])
        ]
        return pd.DataFrame(rows, columns=["trained_task", "eval_task", "accuracy"])


@dataclass
class AucRecorder:
    interval: int
    checkpoints: List[Tuple[int, float]] = field(default_factory=list)

    def add(self, samples_seen: int, accuracy: float):
        self.checkpoints.append((int(samples_seen), float(accuracy)))

    def __len__(self):
        return len(self.checkpoints)

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.checkpoints, columns=["samples_seen", "accuracy"])


def a_last(matrix: AccuracyMatrix) -> float:
    T = matrix.num_tasks
    if T == 0 or matrix.rows_done < T:
        raise ContractError(f"final row missing: {matrix.rows_done} of {T} rows recorded")
    row = matrix.a[T - 1]
    row = row[~np.isnan(row)]
    if row.size == 0:
        raise ContractError("final row has no evaluable task")
    return float(row.sum() / row.size)


def f_last(matrix: AccuracyMatrix) -> float:
    """Mean over i < T of max_j (a[j][i] - a[T][i]); negative terms are kept; T = 1 gives 0"""
    T = matrix.num_tasks
    if T <= 1:
        return 0.0
    if matrix.rows_done < T:
        raise ContractError(f"final row missing: {matrix.rows_done} of {T} rows recorded")
    drops = []
    for i in range(T - 1):
        final = matrix.a[T - 1, i]
        history = matrix.a[i:T - 1, i]
        history = history[~np.isnan(history)]
        if np.isnan(final) or history.size == 0:
            continue
        drops.append(float(np.max(history - final)))
    if not drops:
        return 0.0
    return float(sum(drops) / len(drops))


def a_auc(recorder: AucRecorder) -> float:
    if len(recorder) == 0:
        raise ContractError("A_auc needs at least one checkpoint")
    values = np.array([acc for _, acc in recorder.checkpoints])
    return float(values.sum() / values.size)


def aggregate_seeds(values: Sequence[float]) -> Tuple[float, float]:
    """Mean and population standard deviation"""
    arr = np.asarray(list(values), dtype=np.float64)
    if arr.size == 0:
        raise ContractError("cannot aggregate zero seeds")
    mean = float(arr.sum() / arr.size)
    return mean, float(np.sqrt(((arr - mean) ** 2).sum() / arr.size))


def metric_frame(seed: int, metrics: Dict[str, float]) -> pd.DataFrame:
    return pd.DataFrame(
        [{"seed": seed, "metric": name, "value": float(value)} for name, value in metrics.items()],
        columns=["seed", "metric", "value"],
    )


def aggregate_frame(per_seed: pd.DataFrame) -> pd.DataFrame:
    rows = []
    for name in per_seed["metric"].drop_duplicates():
        mean, std = aggregate_seeds(per_seed.loc[per_seed["metric"] == name, "value"])
        rows.append({"metric": name, "mean": mean, "std": std})
    return pd.DataFrame(rows, columns=["metric", "mean", "std"])
