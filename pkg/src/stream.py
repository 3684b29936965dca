"""
Si-Blurry scenario, single-pass minibatch streaming and the reservoir replay buffer.

Task ids are 0-based everywhere (CSV files included).
"""

import math
from dataclasses import dataclass, field
from typing import List, Optional, Set

import numpy as np
import pandas as pd

from data_loader import Dataset
from errors import ConfigError, ContractError
from prng import Xoshiro256, derive_seed


@dataclass
class SiBlurryConfig:
    num_classes: int = 10
    num_tasks: int = 5
    disjoint_ratio: float = 0.5
    blurry_ratio: float = 0.1
    batch_size: int = 32
    seed: int = 0

    def validate(self):
        if self.num_tasks < 1:
            raise ConfigError(f"need at least one task, got {self.num_tasks}", key="num_tasks")
        if self.num_classes < 1:
            raise ConfigError(f"need at least one class, got {self.num_classes}", key="num_classes")
        for key in ("disjoint_ratio", "blurry_ratio"):
            value = getattr(self, key)
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"must lie in [0, 1], got {value}", key=key)
        if self.disjoint_ratio > 0 and self.num_classes < self.num_tasks:
            raise ConfigError(
                f"{self.num_classes} classes cannot fill {self.num_tasks} disjoint task partitions", key="num_tasks"
            )
        if self.batch_size < 1:
            raise ConfigError(f"must be >= 1, got {self.batch_size}", key="batch_size")

    @property
    def num_disjoint(self) -> int:
        return math.ceil(round(self.disjoint_ratio * self.num_classes, 9))


@dataclass
class TaskAssignment:
    num_tasks: int
    class_kind: List[str]        # per class: "disjoint" | "blurry"
    home_task: np.ndarray        # per class
    labels: np.ndarray           # per sample
    sample_task: np.ndarray      # per sample, after blurry reassignment
    reassigned: np.ndarray       # per sample, bool

    @property
    def num_reassigned(self) -> int:
        return int(self.reassigned.sum())

    def task_label_sets(self) -> List[Set[int]]:
        return [set(int(c) for c in np.unique(self.labels[self.sample_task == t])) for t in range(self.num_tasks)]

    def owned_classes(self, task: int) -> List[int]:
        """Classes whose home task is `task`; accuracy-matrix column ownership"""
        return [int(c) for c in np.flatnonzero(self.home_task == task)]


@dataclass
class Minibatch:
    inputs: np.ndarray
    labels: np.ndarray
    sources: List[str]
    task_id: int = -1
    sample_ids: Optional[np.ndarray] = None

    def __len__(self):
        return int(self.labels.shape[0])

    def concat(self, other: "Minibatch") -> "Minibatch":
        return Minibatch(
            np.concatenate([self.inputs, other.inputs]),
            np.concatenate([self.labels, other.labels]),
            self.sources + other.sources,
            self.task_id,
            None,
        )


def si_blurry_split(cfg: SiBlurryConfig, labels: np.ndarray) -> TaskAssignment:
    """
    1. shuffle classes; the first ceil(disjoint_ratio * C) are disjoint, the rest blurry
    2. each group is dealt round-robin over the T tasks (home tasks)
    3. floor(blurry_ratio * #blurry samples) blurry samples move to a uniformly drawn task
    """
    cfg.validate()
    labels = np.asarray(labels, dtype=np.int64)
    C, T = cfg.num_classes, cfg.num_tasks
    rng = Xoshiro256(derive_seed(cfg.seed, "si-blurry"))
    order = rng.permutation(C)
    n_disjoint = cfg.num_disjoint

    kind = ["blurry"] * C
    home = np.zeros(C, dtype=np.int64)
    for j, c in enumerate(order[:n_disjoint]):
        kind[c] = "disjoint"
        home[c] = j % T
    for j, c in enumerate(order[n_disjoint:]):
        home[c] = j % T

    sample_task = home[labels].copy()
    reassigned = np.zeros(labels.shape[0], dtype=bool)
    blurry_classes = np.array([c for c in range(C) if kind[c] == "blurry"], dtype=np.int64)
    blurry_samples = np.flatnonzero(np.isin(labels, blurry_classes))
    count = math.floor(round(cfg.blurry_ratio * len(blurry_samples), 9))
    for pick in rng.sample(len(blurry_samples), count):
        s = blurry_samples[pick]
        sample_task[s] = rng.randbelow(T)
        reassigned[s] = True
    return TaskAssignment(T, kind, home, labels, sample_task, reassigned)


def stream_batches(assignment: TaskAssignment, dataset: Dataset, batch_size: int, seed: int) -> List[Minibatch]:
    """Tasks in order; samples shuffled within a task and chunked; each sample emitted once"""
    if len(dataset) != len(assignment.labels):
        raise ContractError(f"assignment covers {len(assignment.labels)} samples, dataset has {len(dataset)}")
    rng = Xoshiro256(derive_seed(seed, "stream"))
    batches = []
    for t in range(assignment.num_tasks):
        members = [int(i) for i in np.flatnonzero(assignment.sample_task == t)]
        rng.shuffle(members)
        for start in range(0, len(members), batch_size):
            idx = np.array(members[start:start + batch_size], dtype=np.int64)
            batches.append(Minibatch(dataset.inputs[idx], dataset.labels[idx], ["stream"] * len(idx), t, idx))
    return batches


def scenario_frame(assignment: TaskAssignment) -> pd.DataFrame:
    labels = assignment.labels
    return pd.DataFrame({
        "sample_id": np.arange(labels.shape[0]),
        "class_id": labels,
        "kind": [assignment.class_kind[c] for c in labels],
        "home_task": assignment.home_task[labels],
        "final_task": assignment.sample_task,
    })


@dataclass
class MemoryBuffer:
    capacity: int
    inputs: List[np.ndarray] = field(default_factory=list)
    labels: List[int] = field(default_factory=list)
    seen: int = 0

    @property
    def size(self) -> int:
        return len(self.labels)


def buffer_insert(buf: MemoryBuffer, x: np.ndarray, y: int, rng: Xoshiro256) -> None:
    """Reservoir sampling: every stream item is retained with probability capacity / seen"""
    buf.seen += 1
    if buf.capacity <= 0:
        return
    if buf.size < buf.capacity:
        buf.inputs.append(np.array(x, dtype=np.float64))
        buf.labels.append(int(y))
        return
    j = rng.randbelow(buf.seen)
    if j < buf.capacity:
        buf.inputs[j] = np.array(x, dtype=np.float64)
        buf.labels[j] = int(y)


def buffer_sample(buf: MemoryBuffer, k: int, rng: Xoshiro256) -> Minibatch:
    """k stored items drawn uniformly without replacement, tagged 'replay'"""
    if buf.size == 0:
        raise ContractError("cannot sample from an empty buffer")
    if k > buf.size:
        raise ContractError(f"asked for {k} replay samples, buffer holds {buf.size}")
    picks = rng.sample(buf.size, k)
    return Minibatch(
        np.stack([buf.inputs[i] for i in picks]),
        np.array([buf.labels[i] for i in picks], dtype=np.int64),
        ["replay"] * k,
    )
