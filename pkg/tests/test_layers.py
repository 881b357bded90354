import numpy as np
import pytest

from graphemelab import layers
from graphemelab.numerics import (
    Prng,
    Tape,
    add,
    concat,
    constant,
    grad_check,
    matmul,
    mul,
    parameter,
    reduce_sum,
    sigmoid,
    slice_axis,
    tanh,
)


def lstm_params(inputs=3, hidden=4, seed=0) -> dict:
    params = {}
    layers.add_lstm(params, "cell", inputs, hidden, Prng(seed))
    return params


def stepwise_lstm(params, x, reverse=False):
    """The same recurrence written with one tape record per primitive."""
    w_input, w_hidden, bias = params["cell.w_input"], params["cell.w_hidden"], params["cell.bias"]
    size = w_hidden.shape[0]
    h = constant(np.zeros((1, size)))
    c = constant(np.zeros((1, size)))
    rows = {}
    order = range(x.shape[0] - 1, -1, -1) if reverse else range(x.shape[0])
    for t in order:
        pre = add(add(matmul(slice_axis(x, 0, t, t + 1), w_input), matmul(h, w_hidden)), bias)
        i = sigmoid(slice_axis(pre, 1, 0, size))
        f = sigmoid(slice_axis(pre, 1, size, 2 * size))
        g = tanh(slice_axis(pre, 1, 2 * size, 3 * size))
        o = sigmoid(slice_axis(pre, 1, 3 * size, 4 * size))
        c = add(mul(f, c), mul(i, g))
        h = mul(o, tanh(c))
        rows[t] = h
    return concat([rows[t] for t in range(x.shape[0])], axis=0)


def tape_grads(loss_fn, params) -> dict:
    for tensor in params.values():
        tensor.grad = None
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    return {name: tensor.grad.copy() for name, tensor in params.items()}


def test_forget_bias_starts_at_one():
    params = lstm_params(hidden=2)
    np.testing.assert_array_equal(params["cell.bias"].data, [0, 0, 1, 1, 0, 0, 0, 0])
    assert layers.lstm_hidden_size(params, "cell") == 2


@pytest.mark.parametrize("reverse", [False, True])
def test_fused_sequence_matches_stepwise_recurrence(reverse):
    params = lstm_params(seed=1)
    prng = Prng(2)
    x = parameter(prng.gaussian_array((5, 3)), "x")
    weights = constant(prng.gaussian_array((5, 4)))
    fused = layers.run_lstm(params, "cell", x, reverse=reverse)
    np.testing.assert_allclose(fused.data, stepwise_lstm(params, x, reverse).data, rtol=1e-12, atol=1e-14)

    everything = {**params, "x": x}
    expected = tape_grads(lambda: reduce_sum(mul(stepwise_lstm(params, x, reverse), weights)), everything)
    actual = tape_grads(lambda: reduce_sum(mul(layers.run_lstm(params, "cell", x, reverse), weights)),
                        everything)
    for name in everything:
        np.testing.assert_allclose(actual[name], expected[name], rtol=1e-10, atol=1e-13, err_msg=name)


def test_fused_sequence_gradients():
    params = lstm_params(seed=3)
    x = parameter(Prng(4).gaussian_array((6, 3)), "x")
    weights = constant(Prng(5).gaussian_array((6, 4)))

    def f(_):
        forward = layers.run_lstm(params, "cell", x)
        backward = layers.run_lstm(params, "cell", x, reverse=True)
        return reduce_sum(mul(add(forward, backward), weights))

    assert grad_check(f, [x, params["cell.w_input"], params["cell.w_hidden"], params["cell.bias"]]) <= 1e-6


def test_empty_sequence_has_no_rows():
    params = lstm_params()
    assert layers.run_lstm(params, "cell", constant(np.zeros((0, 3)))).shape == (0, 4)


def test_cell_steps_reproduce_the_sequence():
    params = lstm_params(seed=6)
    x = Prng(7).gaussian_array((4, 3))
    state = layers.initial_state(4)
    hidden = []
    for t in range(4):
        state = layers.lstm_cell(params, "cell", constant(x[t:t + 1]), state)
        hidden.append(state.data[0, :4])
    np.testing.assert_allclose(np.array(hidden), layers.run_lstm(params, "cell", constant(x)).data,
                               rtol=1e-12, atol=1e-14)


def test_cell_gradients_through_state():
    params = lstm_params(seed=8)
    prng = Prng(9)
    inputs = [parameter(prng.gaussian_array((1, 3)), f"x{t}") for t in range(3)]
    weights = constant(prng.gaussian_array((1, 8)))

    def f(_):
        state = layers.initial_state(4)
        total = None
        for x in inputs:
            state = layers.lstm_cell(params, "cell", x, state)
            step = reduce_sum(mul(state, weights))
            total = step if total is None else add(total, step)
        return total

    assert grad_check(f, [*inputs, *params.values()]) <= 1e-6
