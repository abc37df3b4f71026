import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from src.errors import InputError, OracleError, ShapeError, TrainingDivergenceError
from src.numerics import (
    AdamState,
    DenseLayer,
    MlpParams,
    SeededRng,
    adam_step,
    dense_matrix,
    finite_diff_grad,
    matmul,
    mlp_backward,
    mlp_forward,
    outer_sum,
    standard_normal_sample,
)


def test_matmul_rows_do_not_depend_on_batch():
    rng = SeededRng(3)
    x, w = rng.normal((7, 5)), rng.normal((5, 4))
    full = matmul(x, w)
    assert_array_equal(matmul(x[[2, 5]], w), full[[2, 5]])
    assert_allclose(full, x @ w, rtol=1e-12)


def test_dense_matrix_rejects_wrong_entry_count():
    assert dense_matrix([1, 2, 3, 4], 2, 2).shape == (2, 2)
    with pytest.raises(ShapeError):
        dense_matrix([1, 2, 3], 2, 2)
    with pytest.raises(InputError):
        dense_matrix([1, np.nan, 3, 4], 2, 2)


def test_mlp_init_zeroes_output_layer(rng):
    params = MlpParams.init(rng, [3, 5, 2])
    out, _ = mlp_forward(params, rng.normal((4, 3)))
    assert_array_equal(out, np.zeros((4, 2)))
    assert params.n_params == 3 * 5 + 5 + 5 * 2 + 2


def test_mlp_forward_rejects_wrong_width(rng):
    params = MlpParams.init(rng, [3, 2])
    with pytest.raises(ShapeError):
        mlp_forward(params, np.zeros(4))


def test_mlp_rejects_mismatched_layers():
    with pytest.raises(ShapeError):
        MlpParams([DenseLayer(np.zeros((2, 3)), np.zeros(3)),
                   DenseLayer(np.zeros((4, 1)), np.zeros(1))])


def test_mlp_backward_matches_finite_differences(rng):
    params = MlpParams.init(rng, [3, 4, 2], zero_output=False)
    x = rng.normal((6, 3))
    weights = rng.normal((6, 2))

    def loss(vector):
        out, _ = mlp_forward(params.unflatten(vector), x)
        return float(np.sum(out * weights))

    _, cache = mlp_forward(params, x)
    grads, grad_x = mlp_backward(params, cache, weights)
    assert_allclose(grads.flatten(), finite_diff_grad(loss, params.flatten()), rtol=1e-6, atol=1e-9)

    def loss_x(flat_x):
        out, _ = mlp_forward(params, flat_x.reshape(x.shape))
        return float(np.sum(out * weights))

    assert_allclose(grad_x.ravel(), finite_diff_grad(loss_x, x.ravel()), rtol=1e-6, atol=1e-9)


def test_mlp_dict_round_trip_and_finite_check(rng):
    params = MlpParams.init(rng, [2, 3, 1], zero_output=False)
    restored = MlpParams.from_dict(params.to_dict())
    assert_array_equal(restored.flatten(), params.flatten())

    doc = params.to_dict()
    bad = params.unflatten(np.full(params.n_params, np.nan)).to_dict()
    doc[0]["weight"] = bad[0]["weight"]
    with pytest.raises(InputError):
        MlpParams.from_dict(doc)


def test_adam_first_step_moves_by_learning_rate():
    state = AdamState.fresh(3, lr=0.01)
    params = np.array([1.0, -2.0, 0.5])
    grads = np.array([0.3, -4.0, 1e-3])
    new_params, new_state = adam_step(state, params, grads)
    assert_allclose(new_params, params - 0.01 * np.sign(grads), rtol=1e-6)
    assert new_state.t == 1
    assert state.t == 0


@given(st.lists(st.floats(-10, 10), min_size=1, max_size=8))
def test_adam_step_is_odd_in_the_gradient(values):
    grads = np.array(values)
    state = AdamState.fresh(grads.size)
    zero = np.zeros(grads.size)
    forward, _ = adam_step(state, zero, grads)
    backward, _ = adam_step(state, zero, -grads)
    assert_allclose(forward, -backward, atol=1e-15)


def test_adam_rejects_non_finite_gradient():
    with pytest.raises(TrainingDivergenceError):
        adam_step(AdamState.fresh(2), np.zeros(2), np.array([1.0, np.inf]))
    with pytest.raises(ShapeError):
        adam_step(AdamState.fresh(2), np.zeros(3), np.zeros(3))


def test_finite_diff_grad_of_quadratic():
    x = np.array([1.0, -2.0, 3.0])
    assert_allclose(finite_diff_grad(lambda v: float(np.sum(v * v)), x), 2 * x, rtol=1e-8)
    with pytest.raises(InputError):
        finite_diff_grad(lambda v: 0.0, x, h=0.0)
    with pytest.raises(OracleError):
        finite_diff_grad(lambda v: float("nan"), x)


def test_seeded_rng_is_reproducible():
    a, b = SeededRng(42), SeededRng(42)
    assert_array_equal(a.normal(11), b.normal(11))
    assert_array_equal(a.permutation(9), b.permutation(9))
    assert not np.array_equal(SeededRng(1).normal(5), SeededRng(2).normal(5))
    assert isinstance(SeededRng(0).normal(), float)


def test_spawned_streams_differ():
    parent = SeededRng(5)
    assert not np.array_equal(parent.spawn(0).normal(4), parent.spawn(1).normal(4))
    assert_array_equal(parent.spawn(3).normal(4), SeededRng(5).spawn(3).normal(4))


def test_standard_normal_sample_moments():
    draws = standard_normal_sample(SeededRng(0), 100_001)
    assert draws.shape == (100_001,)
    assert abs(draws.mean()) < 0.02
    assert abs(draws.var() - 1.0) < 0.02
    assert standard_normal_sample(SeededRng(0), 0).shape == (0,)
    with pytest.raises(InputError):
        standard_normal_sample(SeededRng(0), -1)


def test_outer_sum_collapses_every_leading_axis():
    rng = SeededRng(9)
    a, b = rng.normal((2, 5, 3)), rng.normal((2, 5, 4))
    expected = sum(np.outer(a[i, j], b[i, j]) for i in range(2) for j in range(5))
    assert_allclose(outer_sum(a, b), expected, rtol=1e-12)
    assert_allclose(outer_sum(a[0, 0], b[0, 0]), np.outer(a[0, 0], b[0, 0]))
    with pytest.raises(ShapeError):
        outer_sum(a, b[:, :4])


def test_mlp_backward_on_three_axis_batch(rng):
    params = MlpParams.init(rng, [2, 3, 2], zero_output=False)
    x = rng.normal((4, 5, 2))
    _, cache = mlp_forward(params, x)
    grads, grad_x = mlp_backward(params, cache, np.ones((4, 5, 2)))
    _, flat_cache = mlp_forward(params, x.reshape(20, 2))
    flat_grads, flat_grad_x = mlp_backward(params, flat_cache, np.ones((20, 2)))
    assert_allclose(grads.flatten(), flat_grads.flatten(), rtol=1e-12)
    assert_allclose(grad_x.reshape(20, 2), flat_grad_x, rtol=1e-12)


def test_single_affine_layer_by_hand():
    params = MlpParams([DenseLayer(np.array([[2.0]]), np.array([1.0]), "identity")])
    out, _ = mlp_forward(params, np.array([3.0]))
    assert_array_equal(out, [7.0])


def test_mlp_forward_matches_plain_loop(rng):
    params = MlpParams.init(rng, [3, 4, 2], zero_output=False)
    x = rng.normal((5, 3))
    out, _ = mlp_forward(params, x)
    for row, got in zip(x, out):
        a = row
        for layer in params.layers:
            pre = [sum(a[i] * layer.weight[i, j] for i in range(layer.in_dim)) + layer.bias[j]
                   for j in range(layer.out_dim)]
            a = np.tanh(pre) if layer.activation == "tanh" else np.array(pre)
        assert_allclose(got, a, rtol=1e-12, atol=1e-15)


def test_adam_zero_gradient_leaves_parameters():
    params = np.array([0.4, -1.1])
    new_params, _ = adam_step(AdamState.fresh(2, lr=1e-3), params, np.zeros(2))
    assert_array_equal(new_params, params)


def test_adam_small_learning_rate_step():
    new_params, _ = adam_step(AdamState.fresh(1, lr=1e-3), np.array([0.0]), np.array([2.5]))
    assert new_params[0] == pytest.approx(-0.001, rel=1e-6)


def test_finite_diff_grad_of_sine_at_zero():
    grad = finite_diff_grad(lambda v: float(np.sin(v[0])), np.array([0.0]))
    assert grad[0] == pytest.approx(1.0, abs=1e-8)


def test_different_seeds_share_no_early_draws():
    first, second = SeededRng(1).normal(10), SeededRng(2).normal(10)
    assert not set(first.tolist()) & set(second.tolist())
