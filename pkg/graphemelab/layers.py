"""
Shared building blocks: parameter initialization, dense layers and LSTM cells.

Parameters live in flat dicts keyed by dotted names ("encoder.lstm_fwd.w_input"),
which is also the naming used inside checkpoints.

The LSTM runs as fused tape records with hand-written backward passes: a whole
sequence is one record (run_lstm), a single decoder step is one record
(lstm_cell). Gate order in the packed matrices is input, forget, cell, output.
"""

import math

import numpy as np

from graphemelab.numerics import (
    Prng,
    Tensor,
    add,
    constant,
    matmul,
    parameter,
    record,
)

Params = dict[str, Tensor]


def glorot(prng: Prng, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return (prng.uniform_array(shape) * 2.0 - 1.0) * limit


def add_dense(params: Params, prefix: str, inputs: int, outputs: int, prng: Prng,
              bias: float = 0.0) -> None:
    params[f"{prefix}.w"] = parameter(glorot(prng, (inputs, outputs), inputs, outputs), f"{prefix}.w")
    params[f"{prefix}.b"] = parameter(np.full(outputs, bias), f"{prefix}.b")


def dense(params: Params, prefix: str, x: Tensor) -> Tensor:
    return add(matmul(x, params[f"{prefix}.w"]), params[f"{prefix}.b"])


def add_lstm(params: Params, prefix: str, inputs: int, hidden: int, prng: Prng) -> None:
    params[f"{prefix}.w_input"] = parameter(
        glorot(prng, (inputs, 4 * hidden), inputs, 4 * hidden), f"{prefix}.w_input")
    params[f"{prefix}.w_hidden"] = parameter(
        glorot(prng, (hidden, 4 * hidden), hidden, 4 * hidden), f"{prefix}.w_hidden")
    bias = np.zeros(4 * hidden)
    bias[hidden:2 * hidden] = 1.0
    params[f"{prefix}.bias"] = parameter(bias, f"{prefix}.bias")


def lstm_hidden_size(params: Params, prefix: str) -> int:
    return params[f"{prefix}.w_hidden"].shape[0]


# ============================================================================
# Fused LSTM
# ============================================================================

def _activate(pre: np.ndarray, size: int) -> np.ndarray:
    """Sigmoid on the i, f, o blocks and tanh on the g block of packed pre-activations."""
    act = 0.5 * (1.0 + np.tanh(0.5 * pre))
    act[..., 2 * size:3 * size] = np.tanh(pre[..., 2 * size:3 * size])
    return act


def _gate_grads(d_c: np.ndarray, d_o: np.ndarray, act: np.ndarray, c_prev: np.ndarray,
                size: int) -> np.ndarray:
    """Gradient with respect to the packed pre-activations."""
    i = act[..., :size]
    f = act[..., size:2 * size]
    g = act[..., 2 * size:3 * size]
    o = act[..., 3 * size:]
    return np.concatenate([
        d_c * g * i * (1.0 - i),
        d_c * c_prev * f * (1.0 - f),
        d_c * i * (1.0 - g * g),
        d_o * o * (1.0 - o),
    ], axis=-1)


def run_lstm(params: Params, prefix: str, x: Tensor, reverse: bool = False) -> Tensor:
    """Run an LSTM over the rows of x [T x in]; returns hidden states [T x H] in input order."""
    w_input = params[f"{prefix}.w_input"]
    w_hidden = params[f"{prefix}.w_hidden"]
    bias = params[f"{prefix}.bias"]
    steps = x.shape[0]
    size = w_hidden.shape[0]
    pre_input = x.data @ w_input.data + bias.data
    order = list(range(steps - 1, -1, -1)) if reverse else list(range(steps))

    acts = np.zeros((steps, 4 * size))
    h_prev = np.zeros((steps, size))
    c_prev = np.zeros((steps, size))
    tanh_c = np.zeros((steps, size))
    hs = np.zeros((steps, size))
    h = np.zeros(size)
    c = np.zeros(size)
    for t in order:
        h_prev[t] = h
        c_prev[t] = c
        act = _activate(pre_input[t] + h @ w_hidden.data, size)
        c = act[size:2 * size] * c + act[:size] * act[2 * size:3 * size]
        tanh_c[t] = np.tanh(c)
        h = act[3 * size:] * tanh_c[t]
        acts[t] = act
        hs[t] = h

    def backward(grad):
        grad_pre = np.zeros((steps, 4 * size))
        d_h_next = np.zeros(size)
        d_c_next = np.zeros(size)
        for t in reversed(order):
            o = acts[t, 3 * size:]
            d_h = grad[t] + d_h_next
            d_c = d_h * o * (1.0 - tanh_c[t] ** 2) + d_c_next
            grad_pre[t] = _gate_grads(d_c, d_h * tanh_c[t], acts[t], c_prev[t], size)
            d_c_next = d_c * acts[t, size:2 * size]
            d_h_next = grad_pre[t] @ w_hidden.data.T
        return (grad_pre @ w_input.data.T, x.data.T @ grad_pre, h_prev.T @ grad_pre,
                grad_pre.sum(axis=0))

    return record("lstm", (x, w_input, w_hidden, bias), hs, backward)


def initial_state(size: int) -> Tensor:
    """Zero decoder state [1 x 2H], packed as [h | c]."""
    return constant(np.zeros((1, 2 * size)))


def lstm_cell(params: Params, prefix: str, x: Tensor, state: Tensor) -> Tensor:
    """One cell update from packed state [1 x 2H] ([h | c]) and input row x [1 x in]."""
    w_input = params[f"{prefix}.w_input"]
    w_hidden = params[f"{prefix}.w_hidden"]
    bias = params[f"{prefix}.bias"]
    size = w_hidden.shape[0]
    h_prev = state.data[:, :size]
    c_prev = state.data[:, size:]
    act = _activate(x.data @ w_input.data + h_prev @ w_hidden.data + bias.data, size)
    c = act[:, size:2 * size] * c_prev + act[:, :size] * act[:, 2 * size:3 * size]
    tanh_c = np.tanh(c)
    h = act[:, 3 * size:] * tanh_c

    def backward(grad):
        d_h = grad[:, :size]
        d_c = grad[:, size:] + d_h * act[:, 3 * size:] * (1.0 - tanh_c ** 2)
        d_pre = _gate_grads(d_c, d_h * tanh_c, act, c_prev, size)
        d_state = np.concatenate([d_pre @ w_hidden.data.T, d_c * act[:, size:2 * size]], axis=1)
        return (d_pre @ w_input.data.T, d_state, x.data.T @ d_pre, h_prev.T @ d_pre,
                d_pre.sum(axis=0))

    return record("lstm_cell", (x, state, w_input, w_hidden, bias),
                  np.concatenate([h, c], axis=1), backward)
