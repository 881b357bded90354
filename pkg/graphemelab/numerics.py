"""
Numerics: dense float64 tensors with reverse-mode gradients.

Every model in graphemelab is built from the primitives in this module. A
primitive computes its value eagerly with numpy; when a Tape is active and one
of its inputs requires gradients, it also appends a record holding a backward
closure. Tape.backward() replays the records in reverse order.

    with Tape() as tape:
        loss = sse(matmul(x, w), target)
    tape.backward(loss)        # w.grad now holds d loss / d w

Also here: the SplitMix64 generator every seeded operation draws from, the Adam
optimizer, and the central-difference gradient checker.
"""

import contextvars
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from graphemelab.errors import (
    ConfigError,
    DegenerateDistribution,
    IndexOutOfVocabulary,
    NonFiniteValue,
    ShapeMismatch,
)


# ============================================================================
# Tensor and Tape
# ============================================================================

class Tensor:
    """A rank <= 3 array of 64-bit floats with an optional gradient accumulator."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        if self.data.ndim > 3:
            raise ShapeMismatch("tensor", self.data.shape)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def parameter(data, name: str) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


@dataclass
class TapeRecord:
    kind: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "graphemelab_active_tape", default=None
)


class Tape:
    """Ordered record of primitive applications, confined to one thread."""

    def __init__(self):
        self.records: list[TapeRecord] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> bool:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None
        return False

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ShapeMismatch("backward", loss.shape)
        loss.grad = np.ones_like(loss.data)
        for entry in reversed(self.records):
            upstream = entry.output.grad
            if upstream is None:
                continue
            for tensor, grad in zip(entry.inputs, entry.backward(upstream)):
                if grad is None or not tensor.requires_grad:
                    continue
                if tensor.grad is None:
                    tensor.grad = np.array(grad, dtype=np.float64)
                else:
                    tensor.grad = tensor.grad + grad


def record(kind: str, inputs: Sequence[Tensor], value: np.ndarray,
           backward: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]) -> Tensor:
    """Wrap a computed value as a Tensor and record it on the active tape."""
    out = Tensor(value)
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.records.append(TapeRecord(kind, tuple(inputs), out, backward))
    return out


# ============================================================================
# Primitives
# ============================================================================

def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(kind: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(kind, a.shape, b.shape) from None


def matmul(a: Tensor, b: Tensor, transpose_b: bool = False) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeMismatch("matmul", a.shape, b.shape)
    inner = b.shape[1] if transpose_b else b.shape[0]
    if a.shape[1] != inner:
        raise ShapeMismatch("matmul", a.shape, b.shape)
    right = b.data.T if transpose_b else b.data

    def backward(g):
        grad_a = g @ (b.data if transpose_b else b.data.T)
        grad_b = g.T @ a.data if transpose_b else a.data.T @ g
        return grad_a, grad_b

    return record("matmul", (a, b), a.data @ right, backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("add", a, b)
    return record("add", (a, b), a.data + b.data,
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("sub", a, b)
    return record("sub", (a, b), a.data - b.data,
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("mul", a, b)
    return record("mul", (a, b), a.data * b.data,
                  lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return record("tanh", (x,), y, lambda g: (g * (1.0 - y * y),))


def sigmoid(x: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return record("sigmoid", (x,), y, lambda g: (g * y * (1.0 - y),))


def relu(x: Tensor) -> Tensor:
    mask = (x.data > 0).astype(np.float64)
    return record("relu", (x,), x.data * mask, lambda g: (g * mask,))


def _softmax(values: np.ndarray) -> np.ndarray:
    shifted = np.exp(values - values.max(axis=-1, keepdims=True))
    return shifted / shifted.sum(axis=-1, keepdims=True)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    y = _softmax(x.data)
    return record("softmax", (x,), y,
                  lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),))


def log_softmax(x: Tensor) -> Tensor:
    """Log-softmax over the last axis."""
    peak = x.data.max(axis=-1, keepdims=True)
    log_norm = peak + np.log(np.exp(x.data - peak).sum(axis=-1, keepdims=True))
    y = x.data - log_norm
    probs = np.exp(y)
    return record("log_softmax", (x,), y,
                  lambda g: (g - probs * g.sum(axis=-1, keepdims=True),))


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ShapeMismatch("concat")
    try:
        value = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeMismatch("concat", *(t.shape for t in tensors)) from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return record("concat", tuple(tensors), value, backward)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    if not 0 <= start <= stop <= x.shape[axis]:
        raise ShapeMismatch(f"slice[{start}:{stop}]", x.shape)
    index = [slice(None)] * x.data.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def backward(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return record("slice", (x,), x.data[index], backward)


def conv1d(x: Tensor, w: Tensor) -> Tensor:
    """Same-padded 1-D convolution: x [T x C_in], w [width x C_in x C_out] -> [T x C_out]."""
    if x.data.ndim != 2 or w.data.ndim != 3 or w.shape[1] != x.shape[1]:
        raise ShapeMismatch("conv1d", x.shape, w.shape)
    steps = x.shape[0]
    width = w.shape[0]
    left = (width - 1) // 2
    padded = np.zeros((steps + width - 1, x.shape[1]))
    padded[left:left + steps] = x.data
    value = sum(padded[k:k + steps] @ w.data[k] for k in range(width))

    def backward(g):
        grad_padded = np.zeros_like(padded)
        grad_w = np.empty_like(w.data)
        for k in range(width):
            grad_w[k] = padded[k:k + steps].T @ g
            grad_padded[k:k + steps] += g @ w.data[k].T
        return grad_padded[left:left + steps], grad_w

    return record("conv1d", (x, w), value, backward)


def window_max(x: Tensor, width: int = 2) -> Tensor:
    """Max over a sliding window of rows, stride 1, right-padded to keep length."""
    if x.data.ndim != 2 or width < 1:
        raise ShapeMismatch("window_max", x.shape)
    steps = x.shape[0]
    padded = np.full((steps + width - 1, x.shape[1]), -np.inf)
    padded[:steps] = x.data
    stacked = np.stack([padded[k:k + steps] for k in range(width)])
    winner = stacked.argmax(axis=0)
    value = np.take_along_axis(stacked, winner[None], axis=0)[0]

    def backward(g):
        grad_padded = np.zeros_like(padded)
        for k in range(width):
            grad_padded[k:k + steps] += g * (winner == k)
        return (grad_padded[:steps],)

    return record("window_max", (x,), value, backward)


def gather(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Embedding lookup: rows of table [V x E] selected by ids."""
    index = np.asarray(ids, dtype=np.int64).reshape(-1)
    size = table.shape[0]
    bad = index[(index < 0) | (index >= size)]
    if bad.size:
        raise IndexOutOfVocabulary(int(bad[0]), size)

    def backward(g):
        grad = np.zeros_like(table.data)
        np.add.at(grad, index, g)
        return (grad,)

    return record("gather", (table,), table.data[index], backward)


def scale(x: Tensor, factor: float) -> Tensor:
    return record("scale", (x,), x.data * factor, lambda g: (g * factor,))


def reduce_sum(x: Tensor) -> Tensor:
    return record("sum", (x,), np.array(x.data.sum()),
                  lambda g: (np.full(x.shape, float(g)),))


def reduce_mean(x: Tensor) -> Tensor:
    count = x.data.size
    return record("mean", (x,), np.array(x.data.mean()),
                  lambda g: (np.full(x.shape, float(g) / count),))


def sse(prediction: Tensor, target: Tensor) -> Tensor:
    """Sum of squared differences, reduced to a scalar."""
    if prediction.shape != target.shape:
        raise ShapeMismatch("sse", prediction.shape, target.shape)
    diff = prediction.data - target.data

    def backward(g):
        grad = 2.0 * float(g) * diff
        return grad, -grad

    return record("sse", (prediction, target), np.array((diff * diff).sum()), backward)


def renormalize(u: Tensor, floor: float) -> Tensor:
    """Clamp u to at least floor, then rescale the last axis to sum to 1."""
    clamped = np.maximum(u.data, floor)
    total = clamped.sum(axis=-1, keepdims=True)
    if np.any(total <= 0):
        raise DegenerateDistribution("cannot renormalize an all-zero distribution")
    y = clamped / total
    active = (u.data >= floor).astype(np.float64)

    def backward(g):
        grad = (g - (g * y).sum(axis=-1, keepdims=True)) / total
        return (grad * active,)

    return record("renormalize", (u,), y, backward)


# ============================================================================
# SplitMix64
# ============================================================================

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


def prng_next(state: int) -> tuple[int, int]:
    """One SplitMix64 step: returns (output, new state)."""
    state = (state + GOLDEN_GAMMA) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * _MIX1) & MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & MASK64
    return z ^ (z >> 31), state


class Prng:
    """Seeded SplitMix64 stream; all uniform and Gaussian draws derive from next()."""

    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next(self) -> int:
        value, self.state = prng_next(self.state)
        return value

    def next_array(self, count: int) -> np.ndarray:
        """The next `count` outputs of next(), computed in bulk."""
        steps = np.arange(1, count + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + steps * np.uint64(GOLDEN_GAMMA)
            z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
            z = z ^ (z >> np.uint64(31))
        self.state = (self.state + count * GOLDEN_GAMMA) & MASK64
        return z

    def uniform(self) -> float:
        return (self.next() >> 11) * 2.0 ** -53

    def uniform_array(self, shape) -> np.ndarray:
        count = int(np.prod(shape, dtype=np.int64))
        bits = self.next_array(count) >> np.uint64(11)
        return (bits.astype(np.float64) * 2.0 ** -53).reshape(shape)

    def gaussian(self) -> float:
        u1 = 1.0 - self.uniform()
        u2 = self.uniform()
        return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)

    def gaussian_array(self, shape) -> np.ndarray:
        count = int(np.prod(shape, dtype=np.int64))
        pairs = self.uniform_array((count, 2))
        u1 = 1.0 - pairs[:, 0]
        u2 = pairs[:, 1]
        return (np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)).reshape(shape)

    def below(self, bound: int) -> int:
        """Integer in [0, bound) by multiply-shift."""
        return (self.next() * bound) >> 64

    def choice_weighted(self, weights: Sequence[float]) -> int:
        target = self.uniform() * sum(weights)
        running = 0.0
        for index, weight in enumerate(weights):
            running += weight
            if target < running:
                return index
        return len(weights) - 1

    def shuffle(self, items: list) -> None:
        for i in range(len(items) - 1, 0, -1):
            j = self.below(i + 1)
            items[i], items[j] = items[j], items[i]

    def sample(self, population: int, count: int) -> list[int]:
        """`count` distinct indices from range(population), in draw order."""
        pool = list(range(population))
        for i in range(count):
            j = i + self.below(population - i)
            pool[i], pool[j] = pool[j], pool[i]
        return pool[:count]


# ============================================================================
# Optimization
# ============================================================================

@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first: dict[str, np.ndarray] = field(default_factory=dict)
    second: dict[str, np.ndarray] = field(default_factory=dict)


def collect_grads(params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    return {
        name: tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
        for name, tensor in params.items()
    }


def zero_grads(params: Mapping[str, Tensor]) -> None:
    for tensor in params.values():
        tensor.grad = None


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Rescale grads in place so their global L2 norm is at most max_norm."""
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / norm
        for name in grads:
            grads[name] = grads[name] * factor
    return norm


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray],
              state: AdamState) -> Mapping[str, Tensor]:
    """Bias-corrected Adam update of every parameter that has a gradient."""
    if state.lr <= 0:
        raise ConfigError(f"learning rate must be positive, got {state.lr}")
    state.step += 1
    correction1 = 1.0 - state.beta1 ** state.step
    correction2 = 1.0 - state.beta2 ** state.step
    for name, tensor in params.items():
        grad = grads.get(name)
        if grad is None:
            continue
        if grad.shape != tensor.shape:
            raise ShapeMismatch(f"adam_step {name}", tensor.shape, grad.shape)
        m = state.first.get(name)
        v = state.second.get(name)
        if m is None:
            m = np.zeros_like(tensor.data)
            v = np.zeros_like(tensor.data)
        m = state.beta1 * m + (1.0 - state.beta1) * grad
        v = state.beta2 * v + (1.0 - state.beta2) * grad * grad
        state.first[name] = m
        state.second[name] = v
        m_hat = m / correction1
        v_hat = v / correction2
        tensor.data = tensor.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params


# ============================================================================
# Gradient checking
# ============================================================================

def _require_finite(label: str, values: np.ndarray) -> None:
    if not np.all(np.isfinite(values)):
        raise NonFiniteValue(f"{label} contains NaN or Inf")


def grad_check(f: Callable[[Sequence[Tensor]], Tensor], params: Sequence[Tensor],
               h: float = 1e-5, max_entries: int | None = None, seed: int = 0) -> float:
    """Largest relative error between tape gradients and central differences.

    With max_entries set, only that many parameter entries (chosen by a seeded
    draw) are perturbed.
    """
    if h <= 0:
        raise ConfigError(f"step h must be positive, got {h}")
    for tensor in params:
        tensor.grad = None
    with Tape() as tape:
        loss = f(params)
    _require_finite("loss", loss.data)
    tape.backward(loss)
    analytic = [
        tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
        for tensor in params
    ]
    for index, grad in enumerate(analytic):
        _require_finite(f"gradient {index}", grad)

    entries = [(i, j) for i, tensor in enumerate(params) for j in range(tensor.data.size)]
    if max_entries is not None and len(entries) > max_entries:
        chosen = Prng(seed).sample(len(entries), max_entries)
        entries = [entries[k] for k in sorted(chosen)]

    worst = 0.0
    for i, j in entries:
        tensor = params[i]
        original = float(tensor.data.flat[j])
        tensor.data.flat[j] = original + h
        plus = float(f(params).data)
        tensor.data.flat[j] = original - h
        minus = float(f(params).data)
        tensor.data.flat[j] = original
        if not (math.isfinite(plus) and math.isfinite(minus)):
            raise NonFiniteValue(f"perturbed loss is not finite at parameter {i}[{j}]")
        numeric = (plus - minus) / (2.0 * h)
        exact = float(analytic[i].flat[j])
        error = abs(exact - numeric) / max(1e-8, abs(exact) + abs(numeric))
        worst = max(worst, error)
    return worst
