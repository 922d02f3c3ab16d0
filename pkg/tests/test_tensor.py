import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from synergy_moe.errors import DimensionError, NonFiniteError, OracleError, ParameterError, UsageError
from synergy_moe.tensor import (
    PRIMITIVES,
    Tape,
    Tensor,
    add,
    backward,
    cross_entropy,
    dumps,
    grad_check,
    index,
    layer_norm,
    load_tensor,
    loads,
    matmul,
    mse,
    mul,
    save_tensor,
    scale,
    silu,
    softmax,
    top_k,
    tsum,
)


def leaf(a):
    return Tensor(np.asarray(a, dtype=float), requires_grad=True)


def test_matmul_identity_and_annihilator():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(matmul(Tensor(np.eye(2)), a).data, a.data)
    z = matmul(Tensor([[1.0, 0.0], [0.0, 0.0]]), Tensor([[0.0, 0.0], [0.0, 1.0]]))
    assert np.array_equal(z.data, np.zeros((2, 2)))


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_gradient():
    rng = np.random.default_rng(1)
    a, b = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(4, 2)))
    assert grad_check(lambda: tsum(matmul(a, b)), [a, b]) < 1e-6


def test_softmax_cases():
    assert np.allclose(softmax(Tensor([0.0, 0.0, 0.0])).data, 1 / 3, atol=1e-15)
    p = softmax(Tensor([1000.0, 0.0])).data
    assert abs(p[0] - 1) < 1e-12 and p[1] < 1e-12
    rng = np.random.default_rng(2)
    x = leaf(rng.normal(size=8))
    w = Tensor(rng.normal(size=8))
    assert grad_check(lambda: tsum(mul(softmax(x), w)), [x]) < 1e-6


def test_layer_norm_cases():
    one, zero = Tensor(np.ones(3)), Tensor(np.zeros(3))
    assert np.allclose(layer_norm(Tensor([[5.0, 5.0, 5.0]]), one, zero).data, 0.0)
    out = layer_norm(Tensor([[1.0, -1.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2))).data
    assert np.allclose(out, [[1.0, -1.0]], atol=1e-5)
    rng = np.random.default_rng(3)
    x, g, b = leaf(rng.normal(size=(2, 5))), leaf(rng.normal(size=5)), leaf(rng.normal(size=5))
    w = Tensor(rng.normal(size=(2, 5)))
    assert grad_check(lambda: tsum(mul(layer_norm(x, g, b), w)), [x, g, b]) < 1e-6


def test_silu_cases():
    assert silu(Tensor([0.0])).data[0] == 0.0
    assert abs(silu(Tensor([20.0])).data[0] - 20.0) < 1e-6
    rng = np.random.default_rng(4)
    x = leaf(3 * rng.normal(size=7))
    assert grad_check(lambda: tsum(silu(x)), [x]) < 1e-6


def test_silu_extreme_inputs_do_not_overflow():
    out = silu(Tensor([-1000.0, 1000.0])).data
    assert out[0] == 0.0 or abs(out[0]) < 1e-300
    assert out[1] == 1000.0


def test_top_k_cases():
    assert top_k(Tensor([0.1, 0.7, 0.2]), 2)[0] == [1, 2]
    assert top_k(Tensor([0.5, 0.5]), 1)[0] == [0]
    with pytest.raises(ParameterError):
        top_k(Tensor([1.0, 2.0]), 3)
    with pytest.raises(ParameterError):
        top_k(Tensor([1.0, 2.0]), 0)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, 16, elements=st.floats(-10, 10)), st.integers(1, 16))
def test_top_k_matches_sort_oracle(x, k):
    idx, vals = top_k(x, k)
    oracle = sorted(range(16), key=lambda i: (-x[i], i))[:k]
    assert idx == oracle
    assert vals == [x[i] for i in oracle]


def test_mse_cases():
    x = Tensor([1.0, 2.0])
    assert mse(x, x).item() == 0.0
    assert mse(Tensor([1.0, 0.0]), Tensor([0.0, 0.0])).item() == 1.0
    with pytest.raises(DimensionError):
        mse(Tensor([1.0]), Tensor([1.0, 2.0]))
    rng = np.random.default_rng(5)
    a, b = leaf(rng.normal(size=(3, 2))), Tensor(rng.normal(size=(3, 2)))
    with Tape() as tape:
        loss = mse(a, b)
    backward(loss, tape)
    assert np.allclose(a.grad, 2 * (a.data - b.data), atol=1e-15)
    assert grad_check(lambda: mse(a, b), [a]) < 1e-6


def test_cross_entropy_cases():
    v = 7
    assert abs(cross_entropy(Tensor(np.zeros((3, v))), [0, 4, 6]).item() - math.log(v)) < 1e-12
    logits = np.zeros((1, v))
    logits[0, 2] = 1000.0
    assert cross_entropy(Tensor(logits), [2]).item() < 1e-12
    with pytest.raises(ParameterError):
        cross_entropy(Tensor(np.zeros((1, v))), [v])
    with pytest.raises(ParameterError):
        cross_entropy(Tensor(np.zeros((1, v))), [-1])
    rng = np.random.default_rng(6)
    x = leaf(rng.normal(size=(4, v)))
    assert grad_check(lambda: cross_entropy(x, [1, 2, 3, 0]), [x]) < 1e-6


def test_backward_closed_forms():
    x = leaf([1.0, -2.0, 3.0])
    with Tape() as tape:
        loss = tsum(x)
    backward(loss, tape)
    assert np.array_equal(x.grad, np.ones(3))


def test_backward_rejects_non_scalar():
    x = leaf([1.0, 2.0])
    with Tape() as tape:
        y = scale(x, 2.0)
    with pytest.raises(UsageError):
        backward(y, tape)


def test_backward_accumulates_on_repeat():
    x = leaf([1.0, 2.0])
    for _ in range(2):
        with Tape() as tape:
            loss = tsum(mul(x, x))
        backward(loss, tape)
    assert np.allclose(x.grad, 2 * 2 * x.data)


def test_index_gradient_with_duplicates():
    x = leaf(np.arange(6.0).reshape(3, 2))
    with Tape() as tape:
        loss = tsum(index(x, np.array([0, 0, 2])))
    backward(loss, tape)
    assert np.array_equal(x.grad, [[2, 2], [0, 0], [1, 1]])


def test_tape_is_topological_and_replays_bit_exactly():
    rng = np.random.default_rng(7)
    a, b = leaf(rng.normal(size=(3, 3))), leaf(rng.normal(size=3))
    with Tape() as tape:
        h = add(matmul(a, a), b)
        cross_entropy(softmax(h, axis=1), [0, 1, 2])
    assert len(tape) > 0
    assert tape.is_topologically_ordered()
    assert tape.replay_matches()


def test_non_finite_values_rejected():
    with pytest.raises(NonFiniteError):
        Tensor([1.0, float("nan")])
    with pytest.raises(NonFiniteError):
        Tensor([float("inf")])


def test_grad_check_polynomial_exactness():
    rng = np.random.default_rng(8)
    x = leaf(rng.normal(size=(4, 3)))
    assert grad_check(lambda: tsum(mul(x, x)), [x]) < 1e-8


def test_grad_check_softmax_cross_entropy_pipeline():
    rng = np.random.default_rng(9)
    w = leaf(rng.normal(size=(5, 6)))
    x = Tensor(rng.normal(size=(3, 5)))
    assert grad_check(lambda: cross_entropy(matmul(x, w), [0, 5, 2]), [w]) < 1e-6


def test_grad_check_detects_non_determinism():
    x = leaf([1.0])
    state = {"n": 0}

    def f():
        state["n"] += 1
        return scale(tsum(x), float(state["n"]))

    with pytest.raises(OracleError):
        grad_check(f, [x])


def test_grad_check_eps_range():
    x = leaf([1.0])
    with pytest.raises(ParameterError):
        grad_check(lambda: tsum(x), [x], eps=1e-1)


def test_grad_check_catches_corrupted_rule(monkeypatch):
    good = PRIMITIVES["matmul"]

    def bad(a, b):
        out, vjp = good(a, b)
        return out, lambda g: tuple(1.1 * v for v in vjp(g))

    monkeypatch.setitem(PRIMITIVES, "matmul", bad)
    rng = np.random.default_rng(10)
    a, b = leaf(rng.normal(size=(2, 3))), leaf(rng.normal(size=(3, 2)))
    assert grad_check(lambda: tsum(matmul(a, b)), [a, b]) > 1e-3


def test_grad_check_restores_existing_grad():
    x = leaf([1.0, 2.0])
    x.grad = np.array([5.0, 6.0])
    grad_check(lambda: tsum(x), [x])
    assert np.array_equal(x.grad, [5.0, 6.0])


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 4)),
              elements=st.floats(-1e300, 1e300, allow_subnormal=True)))
def test_text_round_trip_is_lossless(x):
    back = loads(dumps(Tensor(x)))
    assert back.shape == x.shape
    assert np.array_equal(back.data, x)


def test_save_load_tensor(tmp_path):
    x = Tensor(np.random.default_rng(11).normal(size=(3, 2)))
    save_tensor(x, tmp_path / "x.txt")
    assert np.array_equal(load_tensor(tmp_path / "x.txt").data, x.data)
