#!/usr/bin/env python3
"""
Online training loop on small synthetic streams.
"""

import os
import sys
sys.path.insert(0, os.path.join(os.path.dirname(os.path.abspath(__file__)), ".."))

import numpy as np
import pytest

from classifier import cosine_logits, make_mask, masked_softmax
from config import ExperimentConfig
from data_loader import Dataset, synth_dataset
from errors import DimensionError
from ndgrad import TapeGraph, Tensor
from promptsel import key_cosines, query_of, select_prompt
from stream import Minibatch, TaskAssignment
from trainer import (
    AdamState, adam_step, build_run, evaluate_accuracy, majority_baseline, run_stream, train_on_batch,
)


def small_cfg(**overrides):
    base = dict(samples_per_class=20, eval_interval=50, seeds=[1], quiet=True)
    base.update(overrides)
    return ExperimentConfig(**base)


def _batch(labels, seed=0):
    ds = synth_dataset(10, 8, 32, 0.6, seed)
    idx = [int(np.flatnonzero(ds.labels == y)[k % 8]) for k, y in enumerate(labels)]
    return Minibatch(ds.inputs[idx], ds.labels[idx], ["stream"] * len(idx), 0, np.array(idx))


def test_adam_zero_gradient_leaves_parameter_unchanged():
    p = Tensor([[0.3, -1.2], [5.0, 0.0]])
    before = p.data.copy()
    adam_step({"p": p}, {"p": np.zeros((2, 2))}, AdamState())
    assert np.array_equal(p.data, before)


def test_adam_first_step_closed_form():
    p = Tensor([1.0, -2.0])
    state = AdamState(lr=0.005)
    adam_step({"p": p}, {"p": np.ones(2)}, state)
    m_hat = (0.1 * 1.0) / (1 - 0.9)
    v_hat = (0.001 * 1.0) / (1 - 0.999)
    expected = np.array([1.0, -2.0]) - 0.005 * m_hat / (np.sqrt(v_hat) + 1e-8)
    assert np.allclose(p.data, expected, rtol=0, atol=1e-15)
    assert abs((p.data[0] - 1.0) + 0.005) < 1e-9
    assert state.step == 1


def test_adam_shape_mismatch():
    with pytest.raises(DimensionError):
        adam_step({"p": Tensor([1.0, 2.0])}, {"p": np.ones(3)}, AdamState())


def test_masked_prototypes_are_bit_identical_after_a_step():
    run = build_run(small_cfg(), seed=1)
    before = run.head.prototypes.data.copy()
    batch = _batch([0, 1, 1, 0, 3])
    train_on_batch(run, batch)
    after = run.head.prototypes.data
    for c in (2, 4, 5, 6, 7, 8, 9):
        assert np.array_equal(after[c], before[c])
    for c in (0, 1, 3):
        assert not np.array_equal(after[c], before[c])

    z = cosine_logits(TapeGraph(record=False).const(np.ones((1, 32))), run.head).data
    probs = masked_softmax(z, make_mask(batch.labels, 10))
    assert np.all(probs[0, [2, 4, 5, 6, 7, 8, 9]] == 0.0)


def test_adam_row_mask_freezes_value_and_moments():
    p = Tensor(np.zeros((3, 2)))
    state = AdamState()
    adam_step({"p": p}, {"p": np.ones((3, 2))}, state, {"p": np.array([True, False, True])})
    assert np.array_equal(p.data[1], [0.0, 0.0])
    assert np.array_equal(state.m["p"][1], [0.0, 0.0])
    assert np.array_equal(state.v["p"][1], [0.0, 0.0])
    assert np.all(p.data[[0, 2]] < 0.0)

    frozen_row = p.data[0].copy()
    adam_step({"p": p}, {"p": np.ones((3, 2))}, state, {"p": np.array([False, True, False])})
    assert np.array_equal(p.data[0], frozen_row)
    assert np.allclose(state.m["p"][1], 0.1)
    assert np.all(p.data[1] < 0.0)
    assert state.step == 2


def test_adam_rejects_bad_row_mask():
    with pytest.raises(DimensionError):
        adam_step({"p": Tensor(np.zeros((3, 2)))}, {"p": np.ones((3, 2))}, AdamState(), {"p": np.array([1, 0, 1])})
    with pytest.raises(DimensionError):
        adam_step({"p": Tensor(np.zeros((3, 2)))}, {"p": np.ones((3, 2))}, AdamState(), {"p": np.array([True, False])})


def test_earlier_classes_stay_frozen_on_later_masked_steps():
    for head in ("cosine", "linear"):
        run = build_run(small_cfg(head=head), seed=1)
        train_on_batch(run, _batch([0, 1, 0, 1]))
        before = {name: t.data.copy() for name, t in run.head.parameters().items()}
        for step in range(3):
            train_on_batch(run, _batch([2, 3, 2, 3], seed=step))
        for name, t in run.head.parameters().items():
            assert np.array_equal(t.data[[0, 1]], before[name][[0, 1]]), (head, name)
            assert not np.array_equal(t.data[[2, 3]], before[name][[2, 3]]), (head, name)


def test_without_masking_every_prototype_moves():
    run = build_run(small_cfg(masking=False), seed=1)
    before = run.head.prototypes.data.copy()
    train_on_batch(run, _batch([0, 1]))
    assert all(not np.array_equal(run.head.prototypes.data[c], before[c]) for c in range(10))


def test_loss_is_finite_and_non_negative_for_every_mode():
    modes = [
        dict(adapter="prefix"), dict(adapter="input"), dict(adapter="none"),
        dict(adapter="pool", pool_size=3, selection="similarity"),
        dict(adapter="pool", pool_size=3, selection="random"),
        dict(adapter="prefix", head="linear"),
    ]
    for mode in modes:
        run = build_run(small_cfg(**mode), seed=2)
        for step in range(3):
            loss = train_on_batch(run, _batch([step, 5, 7, 9], seed=step))
            assert np.isfinite(loss) and loss >= 0.0


def test_pool_of_one_matches_single_prompt_step_for_step():
    single = build_run(small_cfg(adapter="prefix", prompt_layers=2, prompt_length=4), seed=3)
    pooled = build_run(small_cfg(adapter="pool", pool_size=1, pool_shared_layers=0, pool_layers=2,
                                 pull_weight=0.0), seed=3)
    pooled.adapter.pooled = [(Tensor(k.data[None]), Tensor(v.data[None]))
                             for k, v in zip(single.adapter.keys, single.adapter.values)]
    assert np.array_equal(single.head.prototypes.data, pooled.head.prototypes.data)

    for step in range(4):
        batch = _batch([step, step + 1, 9 - step, 4], seed=step)
        assert train_on_batch(single, batch) == train_on_batch(pooled, batch)
    for j in range(2):
        assert np.array_equal(single.adapter.keys[j].data, pooled.adapter.pooled[j][0].data[0])
    assert np.array_equal(single.head.prototypes.data, pooled.head.prototypes.data)


def test_selection_log_records_stream_samples_only():
    run = build_run(small_cfg(adapter="pool", pool_size=4, buffer_size=8), seed=4)
    train_on_batch(run, _batch([0, 1, 2]))
    train_on_batch(run, _batch([3, 4]))
    assert len(run.selection_log) == 5
    assert run.buffer.size == 5
    assert run.first_seen == {0: 0, 1: 0, 2: 0, 3: 1, 4: 1}


def test_logged_cosine_is_taken_before_keys_move():
    run = build_run(small_cfg(adapter="pool", pool_size=4, selection="similarity", pull_weight=0.5), seed=4)
    batch = _batch([0, 1, 2, 3])
    q = query_of(run.encoder, batch.inputs)
    cos = key_cosines(q, run.adapter)
    chosen = select_prompt(q, run.adapter)
    keys_before = run.adapter.keys.data.copy()
    train_on_batch(run, batch)
    assert not np.array_equal(run.adapter.keys.data, keys_before)
    for r, record in enumerate(run.selection_log.records):
        assert record.prompt_id == chosen[r]
        assert record.cosine == cos[r, chosen[r]]


def test_evaluation_is_side_effect_free():
    run = build_run(small_cfg(adapter="pool", pool_size=3, selection="random", buffer_size=4), seed=5)
    train_on_batch(run, _batch([0, 1, 2, 3]))
    test = synth_dataset(10, 5, 32, 0.6, seed=9)
    rng_state = list(run.rng.s)
    params = {k: t.data.copy() for k, t in run.learnable().items()}
    labels = list(run.buffer.labels)
    first = evaluate_accuracy(run, test)
    assert 0.0 <= first <= 1.0
    assert evaluate_accuracy(run, test) == first
    assert run.rng.s == rng_state
    assert run.buffer.labels == labels
    for name, t in run.learnable().items():
        assert np.array_equal(t.data, params[name])
    assert np.isnan(evaluate_accuracy(run, test, classes=[]))


def test_run_stream_counts_and_frozen_backbone():
    cfg = small_cfg()
    result = run_stream(cfg, seed=1)
    train_total = 10 * (20 - 4)
    assert len(result.anytime) == train_total // cfg.eval_interval
    assert [s for s, _ in result.anytime.checkpoints] == [50, 100, 150]
    assert result.matrix.rows_done == cfg.num_tasks
    assert set(result.metrics) == {"A_auc", "A_last", "F_last"}
    assert result.run.samples_seen == train_total
    assert len(result.norm_rows) == cfg.num_tasks * cfg.num_classes
    assert result.params == 4 * 32 * 2 + 10 * 32


def test_pool_run_logs_one_inference_selection_per_test_sample():
    result = run_stream(small_cfg(adapter="pool", pool_size=4), seed=1)
    log = result.inference_log
    assert len(log) == 10 * 4
    assert sorted(r.class_id for r in log.records) == sorted(list(range(10)) * 4)
    for record in log.records:
        assert record.task_id == result.assignment.home_task[record.class_id]
        assert 0 <= record.prompt_id < 4
    assert len(run_stream(small_cfg(), seed=1).inference_log) == 0


def test_majority_baseline_scores_the_most_frequent_stream_class():
    def assignment(labels):
        labels = np.array(labels)
        return TaskAssignment(2, ["disjoint"] * 3, np.array([0, 0, 1]), labels,
                              np.zeros(labels.size, dtype=np.int64), np.zeros(labels.size, dtype=bool))

    test = Dataset(np.zeros((6, 1)), np.array([0, 1, 1, 2, 2, 2]), 3)
    assert abs(majority_baseline(assignment([0, 1, 1, 2]), test) - (2 / 3) / 2) < 1e-12
    assert abs(majority_baseline(assignment([2, 2, 0, 0]), test) - (1 / 3) / 2) < 1e-12
    assert np.isnan(majority_baseline(assignment([]), test))


def test_empty_stream_gives_empty_metrics():
    result = run_stream(small_cfg(samples_per_class=0), seed=1)
    assert result.metrics == {}
    assert len(result.anytime) == 0


def test_run_stream_is_deterministic():
    a = run_stream(small_cfg(buffer_size=10), seed=2)
    b = run_stream(small_cfg(buffer_size=10), seed=2)
    assert a.metrics == b.metrics
    assert a.anytime.checkpoints == b.anytime.checkpoints
    assert a.losses == b.losses


def test_toy_run_beats_majority_baseline():
    cfg = ExperimentConfig(seeds=[1], quiet=True)
    result = run_stream(cfg, seed=1)
    assert 0.0 <= result.baseline < 1.0
    assert result.metrics["A_last"] > result.baseline
    assert result.metrics["A_auc"] > result.baseline


if __name__ == "__main__":
    for name, fn in list(globals().items()):
        if name.startswith("test_") and callable(fn):
            fn()
            print(f"✅ {name}")
