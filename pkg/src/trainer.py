"""
Online training loop: one pass over the Si-Blurry stream with a frozen
encoder, a trainable adapter and a classifier head.

Per minibatch: optional replay draw, encode, logits, batch mask, masked
cross-entropy (+ key pull loss for prompt pools), backward, Adam step on
adapter and head, then reservoir insertion of the stream samples.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from classifier import CosineHead, LinearHead, head_logits, make_mask, masked_ce_loss, weight_norm_rows, predict
from data_loader import Dataset, load_dataset, split_holdout
from encoder import EncoderParams, InputPrompt, PromptSet, encode, learnable_count
from errors import ContractError, DimensionError
from metrics import AccuracyMatrix, AucRecorder, a_auc, a_last, f_last
from ndgrad import TapeGraph, Tensor, add, scale
from prng import Xoshiro256, derive_seed
from promptsel import (
    PromptPool, SelectionLog, key_cosines, key_pull_loss, query_of, select_prompt,
)
from stream import MemoryBuffer, Minibatch, TaskAssignment, buffer_insert, buffer_sample, si_blurry_split, stream_batches
from weights import load_encoder

EVAL_CHUNK = 256


@dataclass
class AdamState:
    lr: float = 0.005
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: Dict[str, Tensor],
    grads: Dict[str, np.ndarray],
    state: AdamState,
    active_rows: Optional[Dict[str, np.ndarray]] = None,
) -> Dict[str, Tensor]:
    """
    Bias-corrected Adam, in place. `active_rows` maps a parameter name to a
    boolean row mask; rows outside it keep their value and both moments, as
    in sparse (lazy) Adam. A zero gradient on zero moments leaves the
    parameter bit-identical.
    """
    active_rows = active_rows or {}
    for name, g in grads.items():
        if name not in params:
            raise ContractError(f"gradient for unknown parameter '{name}'")
        if tuple(g.shape) != tuple(params[name].shape):
            raise DimensionError(f"gradient for '{name}' has shape {list(g.shape)}, parameter has {params[name].shape}")
        rows = active_rows.get(name)
        if rows is not None and (rows.dtype != bool or rows.shape != g.shape[:1]):
            raise DimensionError(f"row mask for '{name}' must be boolean of length {g.shape[0]}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for name, g in grads.items():
        p = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        rows = active_rows.get(name, slice(None))
        m[rows] = b1 * m[rows] + (1.0 - b1) * g[rows]
        v[rows] = b2 * v[rows] + (1.0 - b2) * (g[rows] * g[rows])
        m_hat = m[rows] / (1.0 - b1 ** t)
        v_hat = v[rows] / (1.0 - b2 ** t)
        p.data[rows] -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params


@dataclass
class TrainRun:
    encoder: EncoderParams
    adapter: object               # PromptSet | InputPrompt | PromptPool | None
    head: object                  # CosineHead | LinearHead
    buffer: MemoryBuffer
    adam: AdamState
    rng: Xoshiro256
    seed: int
    num_classes: int
    masking: bool = True
    pull_weight: float = 0.0
    selection_log: SelectionLog = field(default_factory=SelectionLog)
    first_seen: Dict[int, int] = field(default_factory=dict)
    samples_seen: int = 0
    steps: int = 0

    @property
    def adapter_kind(self) -> str:
        if self.adapter is None:
            return "none"
        if isinstance(self.adapter, PromptPool):
            return "pool"
        if isinstance(self.adapter, InputPrompt):
            return "input"
        return "prefix"

    def learnable(self) -> Dict[str, Tensor]:
        named = {}
        if self.adapter is not None:
            named.update(self.adapter.parameters())
        named.update(self.head.parameters())
        return named


def build_run(cfg, seed: int, encoder: Optional[EncoderParams] = None) -> TrainRun:
    """Adapter and head draw from separate seed-derived generators, so swapping one keeps the other's init"""
    if encoder is None:
        encoder = load_encoder(cfg)
    D = cfg.hidden_dim
    adapter_rng = Xoshiro256(derive_seed(seed, "adapter"))
    head_rng = Xoshiro256(derive_seed(seed, "head"))

    if cfg.adapter == "prefix":
        adapter = PromptSet(cfg.prompt_layers, cfg.prompt_length, D, adapter_rng)
    elif cfg.adapter == "input":
        adapter = InputPrompt(cfg.prompt_length, D, adapter_rng)
    elif cfg.adapter == "pool":
        adapter = PromptPool(cfg.pool_size, cfg.prompt_length, D, adapter_rng,
                             cfg.pool_shared_layers, cfg.pool_layers, cfg.selection)
    else:
        adapter = None

    if cfg.head == "cosine":
        head = CosineHead(cfg.num_classes, D, head_rng, cfg.tau)
    else:
        head = LinearHead(cfg.num_classes, D, head_rng)

    return TrainRun(
        encoder=encoder,
        adapter=adapter,
        head=head,
        buffer=MemoryBuffer(cfg.buffer_size),
        adam=AdamState(lr=cfg.lr),
        rng=Xoshiro256(derive_seed(seed, "train")),
        seed=seed,
        num_classes=cfg.num_classes,
        masking=cfg.masking,
        pull_weight=cfg.pull_weight if cfg.adapter == "pool" else 0.0,
    )


def _features(run: TrainRun, tape: TapeGraph, inputs: np.ndarray, rng: Optional[Xoshiro256]):
    """Returns (g, query, selected indices); the last two are None outside pool mode"""
    kind = run.adapter_kind
    if kind == "prefix":
        return encode(tape, run.encoder, inputs, prompt_set=run.adapter), None, None
    if kind == "input":
        return encode(tape, run.encoder, inputs, input_prompt=run.adapter), None, None
    if kind == "pool":
        q = query_of(run.encoder, inputs)
        chosen = select_prompt(q, run.adapter, rng)
        return encode(tape, run.encoder, inputs, prompt_set=run.adapter.selected(chosen)), q, chosen
    return encode(tape, run.encoder, inputs), None, None


def batch_loss(run: TrainRun, tape: TapeGraph, batch: Minibatch, rng: Optional[Xoshiro256]):
    """Masked cross-entropy (+ weighted key pull loss) on `tape`; returns (loss, query, selected)"""
    g, q, chosen = _features(run, tape, batch.inputs, rng)
    z = head_logits(g, run.head)
    mask = make_mask(batch.labels, run.num_classes) if run.masking else None
    loss = masked_ce_loss(z, mask, batch.labels)
    if q is not None and run.pull_weight > 0:
        loss = add(loss, scale(key_pull_loss(tape, q, run.adapter, chosen), run.pull_weight))
    return loss, q, chosen


def head_row_mask(run: TrainRun, labels) -> Dict[str, np.ndarray]:
    """Head rows a masked step may touch: the classes present in the batch"""
    if not run.masking:
        return {}
    allowed = make_mask(labels, run.num_classes).allowed
    return {name: allowed for name in run.head.parameters()}


def train_on_batch(run: TrainRun, batch: Minibatch) -> float:
    n_stream = len(batch)
    if n_stream == 0:
        raise ContractError("train_on_batch needs a nonempty batch")
    combined = batch
    if run.buffer.size > 0:
        combined = batch.concat(buffer_sample(run.buffer, min(n_stream, run.buffer.size), run.rng))

    tape = TapeGraph()
    loss, q, chosen = batch_loss(run, tape, combined, run.rng)
    if q is not None:
        # keys move in the step below
        cos = key_cosines(q[:n_stream], run.adapter)
        for r in range(n_stream):
            run.selection_log.add(batch.labels[r], batch.task_id, chosen[r], cos[r, chosen[r]])
    grads = tape.backward(loss)
    adam_step(tape.parameters(), grads, run.adam, head_row_mask(run, combined.labels))

    for y in batch.labels:
        run.first_seen.setdefault(int(y), run.steps)
    for x, y in zip(batch.inputs, batch.labels):
        buffer_insert(run.buffer, x, y, run.rng)
    run.samples_seen += n_stream
    run.steps += 1
    return float(loss.data[0])


def evaluate_accuracy(run: TrainRun, dataset: Dataset, classes=None) -> float:
    """
    Unmasked argmax accuracy over the samples whose label is in `classes`
    (all samples when None). NaN when nothing qualifies. Touches no training
    state; random pool selection draws from a fork of the training rng.
    """
    keep = np.ones(len(dataset), dtype=bool) if classes is None else np.isin(dataset.labels, list(classes))
    idx = np.flatnonzero(keep)
    if idx.size == 0:
        return float("nan")
    rng = run.rng.fork(run.samples_seen)
    correct = 0
    for start in range(0, idx.size, EVAL_CHUNK):
        part = idx[start:start + EVAL_CHUNK]
        g, _, _ = _features(run, TapeGraph(record=False), dataset.inputs[part], rng)
        correct += int((predict(g, run.head) == dataset.labels[part]).sum())
    return correct / idx.size


def inference_selection(run: TrainRun, dataset: Dataset, assignment: TaskAssignment) -> SelectionLog:
    """
    Selections of the trained pool on `dataset`, each tagged with the home task
    of its class. Same rng discipline as evaluate_accuracy.
    """
    log = SelectionLog()
    if run.adapter_kind != "pool":
        return log
    rng = run.rng.fork(run.samples_seen)
    for start in range(0, len(dataset), EVAL_CHUNK):
        inputs = dataset.inputs[start:start + EVAL_CHUNK]
        labels = dataset.labels[start:start + EVAL_CHUNK]
        q = query_of(run.encoder, inputs)
        chosen = select_prompt(q, run.adapter, rng)
        cos = key_cosines(q, run.adapter)
        for r, y in enumerate(labels):
            log.add(y, assignment.home_task[y], chosen[r], cos[r, chosen[r]])
    return log


def majority_baseline(assignment: TaskAssignment, test: Dataset) -> float:
    """
    A_last of a predictor that always answers the most frequent stream class
    (lowest id on ties), scored per task column like the trained model.
    """
    if assignment.labels.size == 0:
        return float("nan")
    majority = int(np.argmax(np.bincount(assignment.labels, minlength=test.num_classes)))
    columns = []
    for t in range(assignment.num_tasks):
        in_column = np.isin(test.labels, assignment.owned_classes(t))
        if in_column.any():
            columns.append(float((test.labels[in_column] == majority).mean()))
    return float(np.mean(columns)) if columns else float("nan")


@dataclass
class SeedResult:
    seed: int
    metrics: Dict[str, float]
    matrix: AccuracyMatrix
    anytime: AucRecorder
    assignment: TaskAssignment
    norm_rows: List[dict]
    run: TrainRun
    params: int
    losses: List[float] = field(default_factory=list)
    baseline: float = float("nan")
    inference_log: SelectionLog = field(default_factory=SelectionLog)


def _task_row(run: TrainRun, test: Dataset, assignment: TaskAssignment, t: int) -> List[float]:
    return [evaluate_accuracy(run, test, assignment.owned_classes(i)) if assignment.owned_classes(i) else float("nan")
            for i in range(t + 1)]


def summarize(matrix: AccuracyMatrix, anytime: AucRecorder) -> Dict[str, float]:
    """A_auc, A_last and F_last where defined; an empty stream gives {}"""
    metrics = {}
    if len(anytime):
        metrics["A_auc"] = a_auc(anytime)
    if matrix.rows_done == matrix.num_tasks and matrix.num_tasks > 0:
        final = matrix.a[matrix.num_tasks - 1]
        if np.any(~np.isnan(final)):
            metrics["A_last"] = a_last(matrix)
            metrics["F_last"] = f_last(matrix)
    return metrics


def run_stream(cfg, seed: int, encoder: Optional[EncoderParams] = None, dataset: Optional[Dataset] = None) -> SeedResult:
    """
    Trains one seed over the whole stream. A_auc checkpoints fire each time the
    sample count crosses a multiple of eval_interval, over the classes seen so far;
    accuracy-matrix rows are recorded at the end of every task.
    """
    verbose = not cfg.quiet
    cfg.validate()
    if dataset is None:
        dataset = load_dataset(cfg, derive_seed(seed, "data"), verbose)
    train, test = split_holdout(dataset, cfg.test_ratio, Xoshiro256(derive_seed(seed, "holdout")))
    assignment = si_blurry_split(cfg.scenario(seed), train.labels)
    batches = stream_batches(assignment, train, cfg.batch_size, seed)
    run = build_run(cfg, seed, encoder)
    frozen_bytes = run.encoder.fingerprint()

    T = cfg.num_tasks
    matrix = AccuracyMatrix(T)
    anytime = AucRecorder(cfg.eval_interval)
    norm_rows: List[dict] = []
    losses: List[float] = []
    if not batches:
        if verbose:
            print(f"⚠️  Seed {seed}: empty stream, nothing to train")
        return SeedResult(seed, {}, matrix, anytime, assignment, norm_rows, run, learnable_count(run.learnable()))

    if verbose:
        print(f"🧪 Seed {seed}: {len(train)} stream samples in {len(batches)} batches over {T} tasks")
    by_task: Dict[int, List[Minibatch]] = {t: [] for t in range(T)}
    for batch in batches:
        by_task[batch.task_id].append(batch)

    n = cfg.eval_interval
    for t in range(T):
        for batch in by_task[t]:
            before = run.samples_seen
            losses.append(train_on_batch(run, batch))
            crossings = run.samples_seen // n - before // n
            if crossings:
                accuracy = evaluate_accuracy(run, test, run.first_seen)
                if not np.isnan(accuracy):
                    for c in range(crossings):
                        anytime.add((before // n + c + 1) * n, accuracy)
        matrix.record(t, _task_row(run, test, assignment, t))
        norm_rows.extend(weight_norm_rows(run.head, run.steps, run.first_seen))
        if verbose:
            print(f"   ✅ Task {t} done after {run.samples_seen} samples")

    if run.encoder.fingerprint() != frozen_bytes:
        raise ContractError("encoder weights changed during training")
    metrics = summarize(matrix, anytime)
    baseline = majority_baseline(assignment, test)
    if verbose:
        shown = ", ".join(f"{k}={v:.4f}" for k, v in metrics.items())
        print(f"✅ Seed {seed} finished: {shown} (majority baseline {baseline:.4f})")
    return SeedResult(seed, metrics, matrix, anytime, assignment, norm_rows, run,
                      learnable_count(run.learnable()), losses, baseline,
                      inference_selection(run, test, assignment))
