import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from graphemelab.ctc import (
    CtcProblem,
    collapse,
    ctc_brute_force,
    ctc_forward,
    ctc_grad,
    ctc_loss,
    extend_target,
    greedy_decode,
    required_frames,
)
from graphemelab.errors import ProblemTooLarge, TargetTooLong
from graphemelab.numerics import Prng, parameter, grad_check


def log_normalize(logits: np.ndarray) -> np.ndarray:
    peak = logits.max(axis=1, keepdims=True)
    return logits - peak - np.log(np.exp(logits - peak).sum(axis=1, keepdims=True))


def random_problem(seed: int, frames: int, labels: int, target) -> CtcProblem:
    logits = Prng(seed).gaussian_array((frames, labels))
    return CtcProblem(log_normalize(logits), tuple(target))


@st.composite
def problems(draw):
    frames = draw(st.integers(min_value=1, max_value=5))
    symbols = draw(st.integers(min_value=1, max_value=3))
    length = draw(st.integers(min_value=0, max_value=frames))
    target = draw(st.lists(st.integers(min_value=0, max_value=symbols - 1),
                           min_size=length, max_size=length))
    if required_frames(target) > frames:
        target = target[:frames // 2]
    seed = draw(st.integers(min_value=0, max_value=2 ** 32))
    return random_problem(seed, frames, symbols + 1, target)


# ============================================================================
# Loss
# ============================================================================

def test_single_frame_loss_is_label_log_probability():
    log_probs = np.log(np.array([[0.7, 0.3]]))
    assert ctc_forward(CtcProblem(log_probs, (0,))) == pytest.approx(-math.log(0.7))


def test_two_frame_loss_sums_three_paths():
    probs = np.array([[0.6, 0.4], [0.2, 0.8]])
    expected = probs[0, 0] * probs[1, 0] + probs[0, 0] * probs[1, 1] + probs[0, 1] * probs[1, 0]
    assert ctc_forward(CtcProblem(np.log(probs), (0,))) == pytest.approx(-math.log(expected))


def test_empty_target_is_all_blank():
    probs = np.array([[0.5, 0.5], [0.1, 0.9]])
    assert ctc_forward(CtcProblem(np.log(probs), ())) == pytest.approx(-math.log(0.5 * 0.9))


def test_certain_path_has_zero_loss():
    with np.errstate(divide="ignore"):
        log_probs = np.log(np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, 1.0, 0.0]]))
    assert ctc_forward(CtcProblem(log_probs, (0, 1))) == 0.0


def test_target_longer_than_frames():
    with pytest.raises(TargetTooLong) as info:
        ctc_forward(random_problem(0, 1, 3, (0, 1)))
    assert (info.value.frames, info.value.required) == (1, 2)


def test_repeated_labels_need_a_separating_blank():
    assert required_frames((0, 0)) == 3
    with pytest.raises(TargetTooLong):
        ctc_forward(random_problem(0, 2, 2, (0, 0)))
    assert math.isfinite(ctc_forward(random_problem(0, 3, 2, (0, 0))))


def test_extended_target_interleaves_blanks():
    assert extend_target([4, 5], blank=9) == [9, 4, 9, 5, 9]


@given(problems())
@settings(max_examples=100, deadline=None)
def test_recursion_matches_enumeration(problem):
    likelihood = math.exp(-ctc_forward(problem))
    assert likelihood == pytest.approx(ctc_brute_force(problem), rel=1e-12, abs=1e-15)


def test_enumeration_refuses_large_problems():
    with pytest.raises(ProblemTooLarge):
        ctc_brute_force(random_problem(0, 6, 10, (0,)))


@pytest.mark.slow
def test_recursion_matches_enumeration_sweep():
    prng = Prng(2024)
    for seed in range(500):
        frames = 1 + prng.below(6)
        symbols = 1 + prng.below(3)
        target = [prng.below(symbols) for _ in range(prng.below(4))]
        while required_frames(target) > frames:
            target.pop()
        problem = random_problem(seed, frames, symbols + 1, target)
        assert abs(math.exp(-ctc_forward(problem)) - ctc_brute_force(problem)) <= 1e-12


# ============================================================================
# Gradient
# ============================================================================

@given(problems())
@settings(max_examples=50, deadline=None)
def test_gradient_rows_sum_to_zero(problem):
    np.testing.assert_allclose(ctc_grad(problem).sum(axis=1), 0.0, atol=1e-12)


def test_taped_loss_matches_central_differences():
    logits = parameter(Prng(8).gaussian_array((6, 4)), "logits")
    assert grad_check(lambda p: ctc_loss(p[0], [0, 2, 2]), [logits]) <= 1e-6


def numeric_ctc_grad(logits: np.ndarray, target, h: float) -> np.ndarray:
    grad = np.zeros_like(logits)
    for index in np.ndindex(*logits.shape):
        shifted = logits.copy()
        shifted[index] += h
        plus = ctc_forward(CtcProblem(log_normalize(shifted), tuple(target)))
        shifted[index] -= 2.0 * h
        minus = ctc_forward(CtcProblem(log_normalize(shifted), tuple(target)))
        grad[index] = (plus - minus) / (2.0 * h)
    return grad


def test_gradient_matches_central_differences_on_random_problems():
    prng = Prng(77)
    for seed in range(100):
        frames = 1 + prng.below(8)
        symbols = 1 + prng.below(4)
        target = [prng.below(symbols) for _ in range(prng.below(frames + 1))]
        while required_frames(target) > frames:
            target.pop()
        logits = Prng(seed).gaussian_array((frames, symbols + 1))
        analytic = ctc_grad(CtcProblem(log_normalize(logits), tuple(target)))
        numeric = numeric_ctc_grad(logits, target, 1e-6)
        np.testing.assert_allclose(analytic, numeric, rtol=1e-6, atol=5e-8,
                                   err_msg=f"seed {seed}, target {target}")


@pytest.mark.parametrize("target", [(0,), (2,), ()])
def test_single_frame_gradient_is_softmax_minus_one_hot(target):
    logits = np.array([[0.3, -1.2, 0.8, 0.1]])
    probs = np.exp(log_normalize(logits))
    expected = probs.copy()
    expected[0, target[0] if target else 3] -= 1.0
    np.testing.assert_allclose(ctc_grad(CtcProblem(log_normalize(logits), target)), expected, atol=1e-12)


def test_taped_loss_value_matches_forward():
    values = Prng(3).gaussian_array((5, 3))
    expected = ctc_forward(CtcProblem(log_normalize(values), (1, 0)))
    assert ctc_loss(parameter(values, "logits"), [1, 0]).item() == pytest.approx(expected)


# ============================================================================
# Decoding
# ============================================================================

@pytest.mark.parametrize("frames, expected", [
    ([0, 0, 2, 0], [0, 0]),
    ([2, 2], []),
    ([1, 1, 0, 0, 2, 1], [1, 0, 1]),
    ([], []),
])
def test_collapse(frames, expected):
    assert collapse(frames, blank=2) == expected


@given(st.lists(st.integers(min_value=0, max_value=5), max_size=30))
def test_collapse_keeps_blank_free_sequences_without_repeats(labels):
    cleaned = [k for k in labels if k != 5]
    cleaned = [k for i, k in enumerate(cleaned) if i == 0 or cleaned[i - 1] != k]
    assert collapse(cleaned, blank=5) == cleaned


def test_greedy_decode_breaks_ties_to_lowest_id():
    assert greedy_decode(np.zeros((3, 4))) == [0]


def test_greedy_decode_of_no_frames():
    assert greedy_decode(np.zeros((0, 4))) == []


def test_greedy_decode_reads_argmax_path():
    probs = np.array([[0.8, 0.1, 0.1], [0.1, 0.1, 0.8], [0.1, 0.8, 0.1], [0.1, 0.8, 0.1]])
    assert greedy_decode(np.log(probs)) == [0, 1]
