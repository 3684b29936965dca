#!/usr/bin/env python3

import os
import sys
sys.path.insert(0, os.path.join(os.path.dirname(os.path.abspath(__file__)), ".."))

import numpy as np
import pytest

from classifier import (
    CosineHead, LinearHead, cosine_logits, linear_logits, make_mask, masked_ce_loss, masked_softmax,
    weight_norm_rows, predict, prototype_norms,
)
from errors import ConfigError, ContractError, LabelError
from ndgrad import TapeGraph, Tensor
from prng import Xoshiro256


def _features(n=6, d=8, seed=0):
    return Xoshiro256(seed).normal((n, d))


def test_cosine_logits_bounded_by_inverse_temperature():
    head = CosineHead(5, 8, Xoshiro256(1), tau=0.1)
    z = cosine_logits(TapeGraph().const(_features()), head).data
    assert z.shape == (6, 5)
    assert np.all(np.abs(z) <= 10.0 + 1e-12)
    assert np.allclose(prototype_norms(head), 1.0)


def test_cosine_head_rejects_bad_temperature():
    with pytest.raises(ConfigError):
        CosineHead(3, 4, Xoshiro256(0), tau=0.0)


def test_cosine_logits_are_scale_invariant():
    g = _features(seed=2)
    head = CosineHead(5, 8, Xoshiro256(3))
    base = cosine_logits(TapeGraph().const(g), head).data
    for alpha in (1e-3, 1.0, 1e3):
        scaled_feat = cosine_logits(TapeGraph().const(g * alpha), head).data
        assert np.max(np.abs(scaled_feat - base)) <= 1e-10
        assert np.array_equal(np.argmax(scaled_feat, axis=1), np.argmax(base, axis=1))

        for c in range(5):
            rescaled = CosineHead(5, 8, Xoshiro256(3))
            rescaled.prototypes.data[c] *= alpha
            z = cosine_logits(TapeGraph().const(g), rescaled).data
            assert np.max(np.abs(z - base)) <= 1e-10
            assert np.array_equal(np.argmax(z, axis=1), np.argmax(base, axis=1))


def test_linear_logits_formula():
    head = LinearHead(3, 4, Xoshiro256(4))
    head.bias.data[:] = [0.5, -1.0, 2.0]
    g = _features(2, 4, 5)
    z = linear_logits(TapeGraph().const(g), head).data
    assert np.allclose(z, g @ head.weight.data.T + head.bias.data, atol=1e-12)


def test_make_mask_examples():
    mask = make_mask([2, 0, 2], 4)
    assert list(mask.allowed) == [True, False, True, False]
    assert list(mask.values) == [0.0, -np.inf, 0.0, -np.inf]
    with pytest.raises(ContractError):
        make_mask([], 4)
    with pytest.raises(LabelError):
        make_mask([4], 4)


def test_masked_softmax_zeroes_absent_classes():
    z = np.array([[1.0, 5.0, 2.0, 9.0]])
    probs = masked_softmax(z, make_mask([0, 2], 4))
    assert probs[0, 1] == 0.0 and probs[0, 3] == 0.0
    assert abs(probs.sum() - 1.0) < 1e-15
    assert np.allclose(masked_softmax(z, None).sum(), 1.0)


def test_masked_loss_equals_cross_entropy_on_allowed_columns():
    z = np.array([[2.0, 0.5, -1.0, 3.0], [0.0, 1.0, 1.0, 0.0]])
    labels = [0, 2]
    loss = masked_ce_loss(TapeGraph().const(z), make_mask(labels, 4), labels).data[0]
    sub = z[:, [0, 2]]
    expected = np.mean(np.log(np.exp(sub).sum(axis=1)) - sub[[0, 1], [0, 1]])
    assert abs(loss - expected) < 1e-12

    full = masked_ce_loss(TapeGraph().const(z), None, labels).data[0]
    assert full > loss


def test_masked_loss_rejects_masked_label():
    z = TapeGraph().const(np.zeros((1, 3)))
    with pytest.raises(ContractError):
        masked_ce_loss(z, make_mask([0], 3), [1])
    with pytest.raises(LabelError):
        masked_ce_loss(z, None, [3])


def test_masked_prototype_gets_exactly_zero_gradient():
    head = CosineHead(6, 8, Xoshiro256(6))
    tape = TapeGraph()
    labels = [1, 4, 4]
    z = cosine_logits(tape.const(_features(3, 8, 7)), head)
    grads = tape.backward(masked_ce_loss(z, make_mask(labels, 6), labels))["head.prototypes"]
    for c in (0, 2, 3, 5):
        assert np.all(grads[c] == 0.0)
    assert np.any(grads[1] != 0.0)


def test_predict_uses_all_classes_and_lowest_index_on_ties():
    head = LinearHead(3, 2, Xoshiro256(0))
    head.weight.data[:] = [[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]
    pred = predict(np.array([[2.0, 1.0], [0.0, 3.0]]), head)
    assert list(pred) == [0, 2]


def test_weight_norm_rows_keep_first_seen_order():
    head = CosineHead(4, 3, Xoshiro256(8))
    head.prototypes = Tensor([[3.0, 4.0, 0.0], [1.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 1.0]])
    rows = weight_norm_rows(head, 7, {2: 0, 0: 0, 3: 5})
    assert [r["class_id"] for r in rows] == [2, 0, 3, 1]
    assert [r["first_seen_step"] for r in rows] == [0, 0, 5, -1]
    assert rows[1]["norm"] == 5.0
    assert all(r["step"] == 7 for r in rows)


if __name__ == "__main__":
    for name, fn in list(globals().items()):
        if name.startswith("test_") and callable(fn):
            fn()
            print(f"✅ {name}")
