#!/usr/bin/env python3
"""
Autodiff engine: forward values against direct numpy formulas and every
backward rule against central finite differences.
"""

import os
import sys
sys.path.insert(0, os.path.join(os.path.dirname(os.path.abspath(__file__)), ".."))

import numpy as np
import pytest

from errors import ContractError, DimensionError
from ndgrad import (
    TapeGraph, Tensor, add_bias, backward, concat_rows, gather, gelu, grad_check, grad_check_report,
    l2_normalize_rows, layer_norm, masked_cross_entropy, matmul, matmul_exact, mean_all, mul, repeat_batch,
    row_sum, scale, softmax_rows, sub,
)
from prng import Xoshiro256


def _rand(shape, seed=0, std=1.0):
    return Tensor(Xoshiro256(seed).normal(shape, std))


def test_matmul_matches_triple_loop_bitwise():
    a = _rand((5, 7), 1).data
    b = _rand((7, 3), 2).data
    out = matmul(TapeGraph().const(a), b).data
    for i in range(5):
        for j in range(3):
            acc = 0.0
            for k in range(7):
                acc += a[i, k] * b[k, j]
            assert out[i, j] == acc


def test_matmul_examples_and_shape_errors():
    tape = TapeGraph()
    eye = np.eye(3)
    x = _rand((3, 3), 3).data
    assert np.array_equal(matmul(tape.const(eye), x).data, x)
    assert matmul(tape.const(np.ones((1, 2))), np.array([[3.0], [4.0]])).data[0, 0] == 7.0
    with pytest.raises(DimensionError):
        matmul(tape.const(np.ones((2, 3))), np.ones((2, 3)))


def test_matmul_batched_leading_dims():
    a = _rand((2, 4, 3), 4).data
    b = _rand((2, 3, 5), 5).data
    out = matmul_exact(a, b)
    assert out.shape == (2, 4, 5)
    assert np.allclose(out, np.einsum("bik,bkj->bij", a, b), atol=1e-12)


def test_softmax_rows_examples():
    tape = TapeGraph()
    y = softmax_rows(tape.const(np.array([[0.0, 0.0], [1000.0, 0.0], [5.0, 5.0]]))).data
    assert np.allclose(y[0], [0.5, 0.5])
    assert y[1, 0] == 1.0 and y[1, 1] < 1e-300
    assert np.allclose(y.sum(axis=1), 1.0, atol=1e-15)
    shifted = softmax_rows(tape.const(np.array([[1.0, 2.0, 3.0]]) + 100.0)).data
    plain = softmax_rows(tape.const(np.array([[1.0, 2.0, 3.0]]))).data
    assert np.allclose(shifted, plain, atol=1e-15)


def test_layer_norm_zero_mean_unit_variance():
    x = _rand((4, 16), 6).data * 3.0 + 2.0
    y = layer_norm(TapeGraph().const(x), np.ones(16), np.zeros(16), 1e-6).data
    assert np.allclose(y.mean(axis=1), 0.0, atol=1e-12)
    assert np.allclose(y.var(axis=1), 1.0, atol=1e-5)
    with pytest.raises(DimensionError):
        layer_norm(TapeGraph().const(x), np.ones(8), np.zeros(8))


def test_gelu_reference_values():
    y = gelu(TapeGraph().const(np.array([0.0, 1.0, -1.0, 10.0]))).data
    assert y[0] == 0.0
    assert abs(y[1] - 0.841192) < 1e-6
    assert abs(y[2] + 0.158808) < 1e-6
    assert abs(y[3] - 10.0) < 1e-9


def test_concat_rows_allows_empty_prefix():
    tape = TapeGraph()
    b = _rand((3, 4), 7).data
    out = concat_rows(tape.const(np.zeros((0, 4))), b).data
    assert np.array_equal(out, b)
    with pytest.raises(DimensionError):
        concat_rows(tape.const(np.zeros((2, 3))), b)


def test_backward_returns_zero_for_unreached_leaf():
    a, b = _rand((2, 2), 8), _rand((2, 2), 9)
    tape = TapeGraph()
    va = tape.param(a, "a")
    tape.param(b, "b")
    grads = backward(tape, mean_all(mul(va, va)))
    assert list(grads) == ["a", "b"]
    assert np.allclose(grads["a"], a.data / 2.0)
    assert np.array_equal(grads["b"], np.zeros((2, 2)))


def test_backward_needs_scalar_and_same_tape():
    tape = TapeGraph()
    x = tape.param(_rand((2, 2), 10), "x")
    with pytest.raises(ContractError):
        tape.backward(x)
    other = TapeGraph()
    with pytest.raises(ContractError):
        other.backward(mean_all(x))


def test_fan_out_gradients_are_summed():
    x = Tensor([[1.0, 2.0]])
    tape = TapeGraph()
    v = tape.param(x, "x")
    grads = tape.backward(mean_all(add_bias(scale(v, 2.0), np.zeros(2)) + v))
    assert np.allclose(grads["x"], [[1.5, 1.5]])


def test_frozen_and_eval_tapes_record_no_gradient():
    x = _rand((2, 3), 11)
    frozen = TapeGraph(frozen={"x"})
    loss = mean_all(mul(frozen.param(x, "x"), frozen.param(x, "x")))
    assert frozen.backward(loss) == {}
    assert TapeGraph(record=False).parameters() == {}


def test_duplicate_name_with_different_tensor_is_rejected():
    tape = TapeGraph()
    tape.param(_rand((2,), 12), "w")
    with pytest.raises(ContractError):
        tape.param(_rand((2,), 13), "w")


def test_non_finite_leaf_rejected():
    with pytest.raises(ContractError):
        Tensor([1.0, float("nan")])
    with pytest.raises(ContractError):
        TapeGraph().const(np.array([np.inf]))


def test_grad_check_quadratic_is_exact():
    w = _rand((3,), 14)

    def f(tape):
        v = tape.param(w, "w")
        return mean_all(mul(v, v))

    assert grad_check(f, {"w": w}, 1e-3) < 1e-9


def test_grad_check_every_op():
    x = _rand((2, 3, 4), 15, 0.5)
    y = _rand((2, 4, 3), 16, 0.5)
    gamma = Tensor(np.ones(4) + 0.1 * Xoshiro256(17).normal((4,)))
    beta = _rand((4,), 18, 0.1)
    bias = _rand((3,), 19, 0.1)

    def f(tape):
        vx, vy = tape.param(x, "x"), tape.param(y, "y")
        h = layer_norm(vx, tape.param(gamma, "gamma"), tape.param(beta, "beta"))
        h = gelu(matmul(h, vy))
        h = softmax_rows(add_bias(h, tape.param(bias, "bias")))
        h = concat_rows(h, sub(h, scale(h, 0.5)))
        return mean_all(mul(l2_normalize_rows(h), h))

    report = grad_check_report(f, {"x": x, "y": y, "gamma": gamma, "beta": beta, "bias": bias}, 1e-3)
    assert set(report) == {"x", "y", "gamma", "beta", "bias"}
    assert max(report.values()) < 1e-5


def test_grad_check_gather_and_repeat():
    p = _rand((3, 2, 4), 20, 0.5)
    q = _rand((2, 4), 21, 0.5)

    def f(tape):
        g = gather(tape.param(p, "p"), [2, 0, 2])
        r = repeat_batch(tape.param(q, "q"), 3)
        return mean_all(row_sum(mul(g, r)))

    assert grad_check(f, {"p": p, "q": q}) < 1e-8


def test_masked_cross_entropy_gradient_and_zero_columns():
    z = _rand((4, 5), 22)
    allowed = np.array([True, False, True, True, False])
    labels = [0, 2, 3, 0]

    def f(tape):
        return masked_cross_entropy(tape.param(z, "z"), allowed, labels)

    assert grad_check(f, {"z": z}) < 1e-7
    tape = TapeGraph()
    grads = tape.backward(f(tape))
    assert np.all(grads["z"][:, ~allowed] == 0.0)
    with pytest.raises(ContractError):
        masked_cross_entropy(TapeGraph().const(z.data), allowed, [1, 0, 0, 0])


if __name__ == "__main__":
    for name, fn in list(globals().items()):
        if name.startswith("test_") and callable(fn):
            fn()
            print(f"✅ {name}")
