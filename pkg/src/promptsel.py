"""
Prompt-pool baselines and selection forensics.

A pool holds P (prompt, key) pairs. Each input's query (the class token of the
frozen, prompt-free encoder) picks one index, by cosine similarity to the keys,
uniformly at random, or always 0. The same index is used in every pooled block;
the first `shared_layers` blocks use a single shared prompt.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from encoder import PROMPT_INIT_STD, EncoderParams, encode_frozen
from errors import ConfigError, ContractError
from ndgrad import (
    TapeGraph, Tensor, Var, gather, l2_normalize_rows, matmul_exact, mean_all, mul,
    repeat_batch, row_sum, sub,
)
from prng import Xoshiro256

SELECTION_MODES = ("similarity", "random", "fixed")
NORM_EPS = 1e-8


class PromptPool:
    def __init__(
        self,
        size: int,
        length: int,
        dim: int,
        rng: Xoshiro256,
        shared_layers: int = 1,
        pool_layers: int = 2,
        mode: str = "similarity",
    ):
        if size < 1:
            raise ConfigError(f"pool needs at least one entry, got {size}", key="pool_size")
        if mode not in SELECTION_MODES:
            raise ConfigError(f"unknown selection mode '{mode}', expected one of {SELECTION_MODES}", key="selection")
        self.size = size
        self.length = length
        self.mode = mode
        self.shared_layers = shared_layers
        self.pool_layers = pool_layers
        self.keys = Tensor(rng.normal((size, dim), 1.0 / np.sqrt(dim)))
        self.shared: List[Tuple[Tensor, Tensor]] = []
        for _ in range(shared_layers):
            self.shared.append((Tensor(rng.normal((length, dim), PROMPT_INIT_STD)),
                                Tensor(rng.normal((length, dim), PROMPT_INIT_STD))))
        self.pooled: List[Tuple[Tensor, Tensor]] = []
        for _ in range(pool_layers):
            self.pooled.append((Tensor(rng.normal((size, length, dim), PROMPT_INIT_STD)),
                                Tensor(rng.normal((size, length, dim), PROMPT_INIT_STD))))

    @property
    def layers(self) -> int:
        return self.shared_layers + self.pool_layers

    def parameters(self, include_keys: bool = True) -> Dict[str, Tensor]:
        named = {}
        if include_keys:
            named["pool.keys"] = self.keys
        for i, (pk, pv) in enumerate(self.shared):
            named[f"pool.shared.{i}.k"] = pk
            named[f"pool.shared.{i}.v"] = pv
        for j, (pk, pv) in enumerate(self.pooled):
            named[f"pool.layer.{j}.k"] = pk
            named[f"pool.layer.{j}.v"] = pv
        return named

    def selected(self, indices: Sequence[int]) -> "SelectedPrompts":
        return SelectedPrompts(self, np.asarray(indices, dtype=np.int64))


class SelectedPrompts:
    """Per-sample prompts drawn from a pool; plugs into `encode` like a PromptSet"""

    def __init__(self, pool: PromptPool, indices: np.ndarray):
        self.pool = pool
        self.indices = indices

    def layer_prefixes(self, tape: TapeGraph, batch_size: int) -> Dict[int, Tuple[Var, Var]]:
        if len(self.indices) != batch_size:
            raise ContractError(f"{len(self.indices)} selections for a batch of {batch_size}")
        prefixes = {}
        for i, (pk, pv) in enumerate(self.pool.shared):
            prefixes[i] = (repeat_batch(tape.param(pk, f"pool.shared.{i}.k"), batch_size),
                           repeat_batch(tape.param(pv, f"pool.shared.{i}.v"), batch_size))
        offset = self.pool.shared_layers
        for j, (pk, pv) in enumerate(self.pool.pooled):
            prefixes[offset + j] = (gather(tape.param(pk, f"pool.layer.{j}.k"), self.indices),
                                    gather(tape.param(pv, f"pool.layer.{j}.v"), self.indices))
        return prefixes


@dataclass
class SelectionRecord:
    class_id: int
    task_id: int
    prompt_id: int
    cosine: float


@dataclass
class SelectionLog:
    records: List[SelectionRecord] = field(default_factory=list)

    def add(self, class_id: int, task_id: int, prompt_id: int, cosine: float):
        self.records.append(SelectionRecord(int(class_id), int(task_id), int(prompt_id), float(cosine)))

    def __len__(self):
        return len(self.records)

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [(r.class_id, r.task_id, r.prompt_id, r.cosine) for r in self.records],
            columns=["class_id", "task_id", "prompt_id", "cosine"],
        )


def _normalize(x: np.ndarray) -> np.ndarray:
    norm = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    return x / np.maximum(norm, NORM_EPS)


def query_of(params: EncoderParams, x: np.ndarray) -> np.ndarray:
    """Class-token feature of the frozen encoder without any prompt"""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return encode_frozen(params, x[None, :])[0]
    return encode_frozen(params, x)


def key_cosines(q: np.ndarray, pool: PromptPool) -> np.ndarray:
    """[B, P] cosine similarity between queries and every key"""
    q = np.atleast_2d(np.asarray(q, dtype=np.float64))
    return matmul_exact(_normalize(q), _normalize(pool.keys.data).T.copy())


def select_prompt(q: np.ndarray, pool: PromptPool, rng: Optional[Xoshiro256] = None):
    """Index per query: argmax cosine (lowest index on ties), uniform draw, or 0"""
    q = np.asarray(q, dtype=np.float64)
    single = q.ndim == 1
    batch = 1 if single else q.shape[0]
    if pool.mode == "fixed" or pool.size == 1:
        chosen = np.zeros(batch, dtype=np.int64)
    elif pool.mode == "random":
        if rng is None:
            raise ContractError("random selection needs an rng")
        chosen = np.array([rng.randbelow(pool.size) for _ in range(batch)], dtype=np.int64)
    else:
        chosen = np.argmax(key_cosines(q, pool), axis=1).astype(np.int64)
    return int(chosen[0]) if single else chosen


def key_pull_loss(tape: TapeGraph, q: np.ndarray, pool: PromptPool, selected: Sequence[int]) -> Var:
    """
    Mean of 1 - cos(q, k_selected). The query is a constant, so only the
    selected keys receive gradient.
    """
    selected = np.atleast_1d(np.asarray(selected, dtype=np.int64))
    if selected.size and selected.max() >= pool.size:
        raise ContractError(f"selected index {selected.max()} outside pool of {pool.size}")
    q = np.atleast_2d(np.asarray(q, dtype=np.float64))
    keys = gather(tape.param(pool.keys, "pool.keys"), selected)
    cos = row_sum(mul(tape.const(_normalize(q)), l2_normalize_rows(keys, NORM_EPS)))
    return sub(tape.const(np.ones(1)), mean_all(cos))


def selection_histogram(log: SelectionLog, num_classes: int, pool_size: int) -> np.ndarray:
    """[C, P] counts of how often each prompt was selected for each class"""
    if len(log) == 0:
        return np.zeros((num_classes, pool_size), dtype=np.int64)
    df = log.frame()
    counts = pd.crosstab(df["class_id"], df["prompt_id"])
    counts = counts.reindex(index=range(num_classes), columns=range(pool_size), fill_value=0)
    return counts.to_numpy(dtype=np.int64)


def default_prompt_task_map(pool_size: int, num_tasks: int) -> Dict[int, int]:
    return {p: p % num_tasks for p in range(pool_size)}


def task_id_accuracy(log: SelectionLog, prompt_task: Dict[int, int], num_classes: int) -> pd.DataFrame:
    """
    Per class, the fraction of records whose selected prompt belongs to the
    record's true task. Classes without records have n = 0 and accuracy NaN.
    """
    df = log.frame()
    unmapped = sorted(set(df["prompt_id"]) - set(prompt_task))
    if unmapped:
        raise ConfigError(f"prompts {unmapped} have no task assignment", key="prompt_task_map")
    if len(df) == 0:
        grouped = pd.DataFrame({"n": pd.Series(dtype=np.int64), "accuracy": pd.Series(dtype=np.float64)})
    else:
        df["correct"] = (df["prompt_id"].map(prompt_task) == df["task_id"]).astype(np.float64)
        grouped = df.groupby("class_id")["correct"].agg(n="size", accuracy="mean")
    grouped = grouped.reindex(range(num_classes))
    grouped["n"] = grouped["n"].fillna(0).astype(np.int64)
    grouped.index.name = "class_id"
    return grouped.reset_index()[["class_id", "n", "accuracy"]]


def key_similarity_stats(log: SelectionLog) -> pd.DataFrame:
    """Mean and population std of the query/assigned-key cosine per true task"""
    df = log.frame()
    if len(df) == 0:
        return pd.DataFrame(columns=["task_id", "mean_cos", "std_cos"])
    cos = df.groupby("task_id")["cosine"]
    stats = pd.DataFrame({"mean_cos": cos.mean(), "std_cos": cos.std(ddof=0)})
    stats.index.name = "task_id"
    return stats.reset_index()


def histogram_frame(histogram: np.ndarray) -> pd.DataFrame:
    rows = [
        {"class_id": c, "prompt_id": p, "count": int(histogram[c, p])}
        for c in range(histogram.shape[0])
        for p in range(histogram.shape[1])
    ]
    return pd.DataFrame(rows, columns=["class_id", "prompt_id", "count"])
