import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal
from scipy.special import expit

from src.encoder import (
    GruParams,
    HiddenState,
    encode_context,
    encoder_backward,
    gru_step,
)
from src.errors import InputError, ShapeError
from src.numerics import SeededRng, finite_diff_grad


def scalar_gru(w, u, b):
    """D = R = 1 cell with the same weight in every gate slot of a kind."""
    return GruParams(*(np.array([[w]]) for _ in range(3)), *(np.array([[u]]) for _ in range(3)),
                     *(np.array([b]) for _ in range(3)))


def test_zero_weights_keep_zero_state():
    params = GruParams.zeros(2, 4)
    h = encode_context(params, np.ones((5, 2)))
    assert_array_equal(h.values, np.zeros(4))
    assert h.t == 5


def test_single_step_by_hand():
    params = scalar_gru(0.5, -0.3, 0.1)
    x, h = 2.0, 0.4
    z = expit(0.5 * x - 0.3 * h + 0.1)
    r = expit(0.5 * x - 0.3 * h + 0.1)
    candidate = np.tanh(0.5 * x - 0.3 * (r * h) + 0.1)
    expected = (1 - z) * h + z * candidate
    out = gru_step(params, np.array([x]), HiddenState(np.array([h]), 3))
    assert_allclose(out.values, [expected], rtol=1e-14)
    assert out.t == 4


def test_encode_context_is_a_fold_of_steps():
    rng = SeededRng(0)
    params = GruParams.init(rng, 2, 5)
    context = rng.normal((6, 2))
    state = HiddenState(np.zeros(5))
    for row in context:
        state = gru_step(params, row, state)
    assert_array_equal(encode_context(params, context).values, state.values)


def test_encoding_does_not_depend_on_batch():
    rng = SeededRng(1)
    params = GruParams.init(rng, 2, 4)
    contexts = rng.normal((5, 7, 2))
    batched = encode_context(params, contexts).values
    assert batched.shape == (5, 4)
    assert_array_equal(encode_context(params, contexts[[1, 3]]).values, batched[[1, 3]])


def test_context_validation():
    params = GruParams.zeros(2, 3)
    with pytest.raises(InputError):
        encode_context(params, np.zeros((0, 2)))
    with pytest.raises(ShapeError):
        encode_context(params, np.zeros((4, 3)))
    with pytest.raises(ShapeError):
        GruParams(np.zeros((2, 3)), *(np.zeros((2, 3)) for _ in range(2)),
                  *(np.zeros((3, 3)) for _ in range(3)), np.zeros(3), np.zeros(3), np.zeros(4))


@pytest.mark.parametrize("context_len", [1, 5, 8])
def test_backprop_through_time_matches_finite_differences(context_len):
    rng = SeededRng(2)
    params = GruParams.init(rng, 2, 3)
    params = params.unflatten(params.flatten() + 0.2 * rng.normal(params.n_params))
    contexts = rng.normal((4, context_len, 2))
    weights = rng.normal((4, 3))

    def loss(vector):
        return float(np.sum(encode_context(params.unflatten(vector), contexts).values * weights))

    grads = encoder_backward(params, contexts, weights)
    assert_allclose(grads.flatten(), finite_diff_grad(loss, params.flatten()), rtol=1e-5, atol=1e-9)


def test_params_round_trip_through_dict():
    params = GruParams.init(SeededRng(3), 3, 2)
    restored = GruParams.from_dict(params.to_dict())
    assert_array_equal(restored.flatten(), params.flatten())
    assert restored.input_dim == 3 and restored.hidden_dim == 2


def test_zero_weights_halve_the_state():
    params = GruParams.zeros(1, 2)
    out = gru_step(params, np.array([3.0]), HiddenState(np.array([1.0, 1.0])))
    assert_array_equal(out.values, [0.5, 0.5])

    h0 = HiddenState(np.array([4.0, -2.0]))
    assert_array_equal(encode_context(params, np.ones((3, 1)), h0).values, [0.5, -0.25])


@given(st.integers(0, 10_000), st.floats(0.1, 5.0), st.floats(0.0, 3.0))
def test_state_stays_inside_previous_hull(seed, weight_scale, state_scale):
    rng = SeededRng(seed)
    params = GruParams.init(rng, 2, 3)
    params = params.unflatten(weight_scale * rng.normal(params.n_params))
    h_prev = state_scale * rng.normal(3)
    out = gru_step(params, 3.0 * rng.normal(2), HiddenState(h_prev)).values
    assert np.all(np.abs(out) <= np.maximum(np.abs(h_prev), 1.0) + 1e-12)
