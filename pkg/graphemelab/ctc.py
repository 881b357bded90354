"""
CTC: connectionist temporal classification loss, gradient and decoding.

Log-probabilities are [T x (V + 1)] with the blank in the last column. The loss
runs the forward recursion in the log domain over the blank-interleaved target
z = [blank, y1, blank, y2, ..., blank]; the gradient uses the alpha/beta
posteriors. ctc_brute_force enumerates every frame path and is kept as the
oracle the recursion is tested against.
"""

import itertools
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from graphemelab.errors import ProblemTooLarge, ShapeMismatch, TargetTooLong
from graphemelab.numerics import Tensor, record

BRUTE_FORCE_LIMIT = 10 ** 6


@dataclass(frozen=True)
class CtcProblem:
    log_probs: np.ndarray
    target: tuple[int, ...]

    @property
    def blank(self) -> int:
        return self.log_probs.shape[1] - 1

    @property
    def frames(self) -> int:
        return self.log_probs.shape[0]


def extend_target(target: Sequence[int], blank: int) -> list[int]:
    extended = [blank]
    for symbol in target:
        extended.extend((symbol, blank))
    return extended


def required_frames(target: Sequence[int]) -> int:
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def _check(problem: CtcProblem) -> list[int]:
    if problem.log_probs.ndim != 2:
        raise ShapeMismatch("ctc", problem.log_probs.shape)
    if any(not 0 <= s < problem.blank for s in problem.target):
        raise ShapeMismatch("ctc target", problem.log_probs.shape, (len(problem.target),))
    needed = required_frames(problem.target)
    if problem.frames < needed or problem.frames == 0:
        raise TargetTooLong(problem.frames, max(needed, 1))
    return extend_target(problem.target, problem.blank)


def _shift_right(values: np.ndarray, k: int) -> np.ndarray:
    out = np.full_like(values, -np.inf)
    if k < values.size:
        out[k:] = values[:values.size - k]
    return out


def _shift_left(values: np.ndarray, k: int) -> np.ndarray:
    out = np.full_like(values, -np.inf)
    if k < values.size:
        out[:values.size - k] = values[k:]
    return out


def _skip_allowed(z: np.ndarray) -> np.ndarray:
    """skip[s]: the transition s-2 -> s is allowed (z[s] != z[s-2])."""
    skip = np.zeros(z.size, dtype=bool)
    skip[2:] = z[2:] != z[:-2]
    return skip


def _alpha(log_probs: np.ndarray, z: list[int]) -> np.ndarray:
    z = np.asarray(z)
    frames, size = log_probs.shape[0], z.size
    skip = _skip_allowed(z)
    alpha = np.full((frames, size), -np.inf)
    alpha[0, 0] = log_probs[0, z[0]]
    if size > 1:
        alpha[0, 1] = log_probs[0, z[1]]
    for t in range(1, frames):
        prev = alpha[t - 1]
        jump = np.where(skip, _shift_right(prev, 2), -np.inf)
        alpha[t] = np.logaddexp(np.logaddexp(prev, _shift_right(prev, 1)), jump) + log_probs[t, z]
    return alpha


def _beta(log_probs: np.ndarray, z: list[int]) -> np.ndarray:
    """beta[t, s]: log-probability of emitting frames t+1.. given state s at t."""
    z = np.asarray(z)
    frames, size = log_probs.shape[0], z.size
    skip_ahead = _shift_left(_skip_allowed(z).astype(np.float64), 2) > 0
    beta = np.full((frames, size), -np.inf)
    beta[frames - 1, size - 1] = 0.0
    if size > 1:
        beta[frames - 1, size - 2] = 0.0
    for t in range(frames - 2, -1, -1):
        nxt = beta[t + 1] + log_probs[t + 1, z]
        jump = np.where(skip_ahead, _shift_left(nxt, 2), -np.inf)
        beta[t] = np.logaddexp(np.logaddexp(nxt, _shift_left(nxt, 1)), jump)
    return beta


def _final_log_likelihood(alpha: np.ndarray) -> float:
    last = alpha[-1]
    if last.size == 1:
        return float(last[0])
    return float(np.logaddexp(last[-1], last[-2]))


def ctc_forward(problem: CtcProblem) -> float:
    """Negative log-likelihood of the target under the frame distributions."""
    z = _check(problem)
    return -_final_log_likelihood(_alpha(problem.log_probs, z))


def ctc_grad(problem: CtcProblem) -> np.ndarray:
    """d NLL / d logits, for log_probs = log_softmax(logits)."""
    z = _check(problem)
    log_probs = problem.log_probs
    alpha = _alpha(log_probs, z)
    beta = _beta(log_probs, z)
    log_likelihood = _final_log_likelihood(alpha)
    joint = alpha + beta
    posterior = np.zeros_like(log_probs)
    for s, symbol in enumerate(z):
        posterior[:, symbol] += np.exp(joint[:, s] - log_likelihood)
    return np.exp(log_probs) - posterior


def ctc_brute_force(problem: CtcProblem) -> float:
    """Likelihood of the target by summing over every frame-label path."""
    labels = problem.log_probs.shape[1]
    if labels ** problem.frames >= BRUTE_FORCE_LIMIT:
        raise ProblemTooLarge(f"{labels}^{problem.frames} paths exceed the enumeration limit")
    probs = np.exp(problem.log_probs)
    target = list(problem.target)
    total = 0.0
    for path in itertools.product(range(labels), repeat=problem.frames):
        if collapse(path, problem.blank) == target:
            total += math.prod(probs[t, k] for t, k in enumerate(path))
    return total


def collapse(frame_labels: Sequence[int], blank: int) -> list[int]:
    """Remove consecutive duplicates, then blanks."""
    out = []
    previous = None
    for label in frame_labels:
        if label != previous and label != blank:
            out.append(label)
        previous = label
    return out


def greedy_decode(log_probs: np.ndarray) -> list[int]:
    """Per-frame argmax (ties to the lowest id), then collapse."""
    if log_probs.shape[0] == 0:
        return []
    best = np.argmax(log_probs, axis=1)
    return collapse([int(k) for k in best], log_probs.shape[1] - 1)


def ctc_loss(logits: Tensor, target: Sequence[int]) -> Tensor:
    """CTC negative log-likelihood of logits [T x (V + 1)] as a taped scalar."""
    peak = logits.data.max(axis=1, keepdims=True)
    log_probs = logits.data - peak - np.log(np.exp(logits.data - peak).sum(axis=1, keepdims=True))
    problem = CtcProblem(log_probs, tuple(target))
    value = ctc_forward(problem)

    def backward(g):
        return (float(g) * ctc_grad(problem),)

    return record("ctc", (logits,), np.array(value), backward)
