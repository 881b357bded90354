"""
TTS: contextual grapheme encoder trained on an acoustic-proxy task.

The encoder is a CBH-LSTM block (convolution bank, highway layers,
bidirectional LSTM) with an optional self-attention block on top. A
teacher-forced attention decoder predicts `reduction` frames per step of a
synthetic acoustic target. Training never sees phoneme identities: the frames
are synthesized upstream by synth_target and handed to train_proxy as arrays.

    graphemes --> embedding --> conv bank --> window max --> projection (+ residual)
              --> highway x2 --> BiLSTM --------------------> embeddings [T x 2H]
                                   |  (optional) self-attention
                                   v
    decoder LSTM --> additive attention --> forward attention --> frames [r x F]
"""

import hashlib
import logging
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from graphemelab import layers
from graphemelab.corpus import Corpus, GraphemeVocab, PhonemeVocab, Utterance
from graphemelab.errors import (
    ConfigError,
    DegenerateDistribution,
    EmptyPhonemeSequence,
    InsufficientData,
    NonFiniteLoss,
    UnknownSymbol,
)
from graphemelab.numerics import (
    AdamState,
    Prng,
    Tape,
    Tensor,
    adam_step,
    add,
    clip_grad_norm,
    collect_grads,
    concat,
    constant,
    conv1d,
    gather,
    matmul,
    mul,
    parameter,
    record,
    renormalize,
    scale,
    sigmoid,
    slice_axis,
    softmax,
    sse,
    sub,
    tanh,
    window_max,
    zero_grads,
)

FORWARD_ATTENTION_FLOOR = 1e-12
COARTICULATION = 0.25
NOISE_SIGMA = 0.05
DURATIONS = (2, 3, 4)
_ACOUSTIC_SALT = 0xAC0057C5
_INIT_SALT = 0x7E45


# ============================================================================
# Configuration and models
# ============================================================================

@dataclass(frozen=True)
class TtsConfig:
    embed_dim: int = 64
    conv_k: int = 8
    conv_channels: int = 32
    hidden: int = 64
    decoder_hidden: int = 128
    attention_dim: int = 64
    reduction: int = 2
    frame_width: int = 16
    lr: float = 1e-3
    epochs: int = 10
    self_attention: bool = False
    clip_norm: float = 1.0

    def __post_init__(self):
        sizes = {
            "embed_dim": self.embed_dim, "conv_k": self.conv_k, "conv_channels": self.conv_channels,
            "hidden": self.hidden, "decoder_hidden": self.decoder_hidden,
            "attention_dim": self.attention_dim, "reduction": self.reduction,
            "frame_width": self.frame_width,
        }
        for name, value in sizes.items():
            if value < 1:
                raise ConfigError(f"tts {name} must be >= 1, got {value}")
        if self.epochs < 0:
            raise ConfigError(f"tts epochs must be >= 0, got {self.epochs}")
        if self.lr <= 0 or self.clip_norm <= 0:
            raise ConfigError(f"tts lr and clip_norm must be positive, got {self.lr} and {self.clip_norm}")


@dataclass
class EncoderModel:
    params: dict[str, Tensor]
    conv_k: int
    self_attention: bool

    @property
    def vocab_size(self) -> int:
        return self.params["encoder.embedding"].shape[0]

    @property
    def embed_dim(self) -> int:
        return self.params["encoder.embedding"].shape[1]

    @property
    def hidden(self) -> int:
        return layers.lstm_hidden_size(self.params, "encoder.lstm_fwd")

    @property
    def output_width(self) -> int:
        return 2 * self.hidden

    @classmethod
    def initialize(cls, vocab_size: int, config: TtsConfig, prng: Prng) -> "EncoderModel":
        e, c, h = config.embed_dim, config.conv_channels, config.hidden
        params: dict[str, Tensor] = {}
        params["encoder.embedding"] = parameter(prng.gaussian_array((vocab_size, e)) * 0.3,
                                                "encoder.embedding")
        for k in range(1, config.conv_k + 1):
            weight = layers.glorot(prng, (k, e, c), k * e, k * c)
            params[f"encoder.bank{k}.w"] = parameter(weight, f"encoder.bank{k}.w")
            params[f"encoder.bank{k}.b"] = parameter(np.zeros(c), f"encoder.bank{k}.b")
        layers.add_dense(params, "encoder.proj", config.conv_k * c, e, prng)
        for layer in range(2):
            layers.add_dense(params, f"encoder.highway{layer}.h", e, e, prng)
            layers.add_dense(params, f"encoder.highway{layer}.t", e, e, prng, bias=-1.0)
        layers.add_lstm(params, "encoder.lstm_fwd", e, h, prng)
        layers.add_lstm(params, "encoder.lstm_bwd", e, h, prng)
        if config.self_attention:
            for name in ("query", "key", "value"):
                weight = layers.glorot(prng, (2 * h, 2 * h), 2 * h, 2 * h)
                params[f"encoder.attn.{name}"] = parameter(weight, f"encoder.attn.{name}")
        return cls(params, config.conv_k, config.self_attention)


@dataclass
class DecoderModel:
    params: dict[str, Tensor]
    reduction: int
    frame_width: int
    self_attention: bool

    @property
    def hidden(self) -> int:
        return layers.lstm_hidden_size(self.params, "decoder.lstm")

    @classmethod
    def initialize(cls, memory_width: int, config: TtsConfig, prng: Prng) -> "DecoderModel":
        f, hd, a, r = config.frame_width, config.decoder_hidden, config.attention_dim, config.reduction
        heads = ("attn", "sa_attn") if config.self_attention else ("attn",)
        context = memory_width * len(heads)
        params: dict[str, Tensor] = {}
        layers.add_lstm(params, "decoder.lstm", f + context, hd, prng)
        for head in heads:
            params[f"decoder.{head}.w_query"] = parameter(
                layers.glorot(prng, (hd, a), hd, a), f"decoder.{head}.w_query")
            params[f"decoder.{head}.w_memory"] = parameter(
                layers.glorot(prng, (memory_width, a), memory_width, a), f"decoder.{head}.w_memory")
            params[f"decoder.{head}.v"] = parameter(
                layers.glorot(prng, (1, a), a, 1), f"decoder.{head}.v")
        layers.add_dense(params, "decoder.out", hd + context, r * f, prng)
        return cls(params, r, f, config.self_attention)


# ============================================================================
# Acoustic proxy targets
# ============================================================================

@dataclass(frozen=True)
class AcousticSpec:
    frame_width: int
    codes: np.ndarray
    durations: tuple[int, ...]
    index: dict[str, int]
    coarticulation: float = COARTICULATION
    noise: float = NOISE_SIGMA


def build_acoustic_spec(phonemes: PhonemeVocab, frame_width: int, seed: int,
                        noise: float = NOISE_SIGMA) -> AcousticSpec:
    prng = Prng(seed ^ _ACOUSTIC_SALT)
    codes = prng.gaussian_array((len(phonemes), frame_width))
    durations = tuple(DURATIONS[prng.below(len(DURATIONS))] for _ in phonemes.symbols)
    return AcousticSpec(frame_width, codes, durations, dict(phonemes.index), noise=noise)


def utterance_seed(utterance_id: str, seed: int) -> int:
    digest = hashlib.blake2b(utterance_id.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") ^ (seed & ((1 << 64) - 1))


def synth_target(utterance: Utterance, spec: AcousticSpec, seed: int) -> np.ndarray:
    """Frames [T_a x F]: d_p frames per phoneme, last frame blended toward the next code."""
    if not utterance.phonemes:
        raise EmptyPhonemeSequence(utterance.id)
    try:
        ids = [spec.index[p] for p in utterance.phonemes]
    except KeyError as exc:
        raise UnknownSymbol("acoustic", exc.args[0]) from None
    zero = np.zeros(spec.frame_width)
    frames = []
    for position, phoneme in enumerate(ids):
        code = spec.codes[phoneme]
        following = spec.codes[ids[position + 1]] if position + 1 < len(ids) else zero
        duration = spec.durations[phoneme]
        for j in range(duration):
            weight = spec.coarticulation if j == duration - 1 else 0.0
            frames.append((1.0 - weight) * code + weight * following)
    frames = np.array(frames)
    if spec.noise > 0:
        frames = frames + spec.noise * Prng(utterance_seed(utterance.id, seed)).gaussian_array(frames.shape)
    return frames


def build_frames(corpus: Corpus, spec: AcousticSpec, seed: int) -> dict[str, np.ndarray]:
    """Acoustic targets for every utterance that has phonemes."""
    frames = {}
    for utterance in corpus.utterances:
        if not utterance.phonemes:
            logging.debug(f"Skipping all-silent utterance {utterance.id}")
            continue
        frames[utterance.id] = synth_target(utterance, spec, seed)
    return frames


# ============================================================================
# Encoder
# ============================================================================

def _highway(params: Mapping[str, Tensor], prefix: str, x: Tensor) -> Tensor:
    transform = tanh(layers.dense(params, f"{prefix}.h", x))
    gate = sigmoid(layers.dense(params, f"{prefix}.t", x))
    carry = sub(constant(1.0), gate)
    return add(mul(transform, gate), mul(x, carry))


def encoder_forward(model: EncoderModel, ids: Sequence[int]) -> tuple[Tensor, Tensor | None]:
    """BiLSTM output [T x 2H] and, when enabled, the self-attention output."""
    p = model.params
    x = gather(p["encoder.embedding"], ids)
    bank = [
        tanh(add(conv1d(x, p[f"encoder.bank{k}.w"]), p[f"encoder.bank{k}.b"]))
        for k in range(1, model.conv_k + 1)
    ]
    y = window_max(concat(bank, axis=1), 2)
    y = add(layers.dense(p, "encoder.proj", y), x)
    for layer in range(2):
        y = _highway(p, f"encoder.highway{layer}", y)
    forward = layers.run_lstm(p, "encoder.lstm_fwd", y)
    backward = layers.run_lstm(p, "encoder.lstm_bwd", y, reverse=True)
    output = concat([forward, backward], axis=1)
    if not model.self_attention:
        return output, None
    query = matmul(output, p["encoder.attn.query"])
    key = matmul(output, p["encoder.attn.key"])
    value = matmul(output, p["encoder.attn.value"])
    weights = softmax(scale(matmul(query, key, transpose_b=True), 1.0 / math.sqrt(output.shape[1])))
    return output, add(matmul(weights, value), output)


def encode(model: EncoderModel, ids: Sequence[int]) -> Tensor:
    """Contextual grapheme embeddings [T x D] (the BiLSTM output)."""
    output, _ = encoder_forward(model, ids)
    return output


# ============================================================================
# Attention
# ============================================================================

def additive_weights(keys: Tensor, query: Tensor, v: Tensor) -> Tensor:
    """softmax_n(v . tanh(keys_n + query)) as one tape record; keys [T x A], query and v [1 x A]."""
    energy = np.tanh(keys.data + query.data)
    scores = (energy @ v.data.T).T
    weights = np.exp(scores - scores.max())
    weights /= weights.sum()

    def backward(grad):
        grad_scores = weights * (grad - (grad * weights).sum())
        grad_pre = (grad_scores.T * v.data) * (1.0 - energy * energy)
        return grad_pre, grad_pre.sum(axis=0, keepdims=True), grad_scores @ energy

    return record("additive_attention", (keys, query, v), weights, backward)


def attend_additive(state: Tensor, memory: Tensor, w_query: Tensor, w_memory: Tensor,
                    v: Tensor, keys: Tensor | None = None) -> tuple[Tensor, Tensor]:
    """e_n = v . tanh(W s + V h_n); returns (softmax(e) [1 x T], context [1 x D])."""
    if keys is None:
        keys = matmul(memory, w_memory)
    weights = additive_weights(keys, matmul(state, w_query), v)
    return weights, matmul(weights, memory)


def _forward_mass(previous: Tensor, additive: Tensor) -> Tensor:
    """(alpha(n) + alpha(n-1)) * additive(n), with alpha(-1) = 0."""
    mass = previous.data.copy()
    mass[:, 1:] += previous.data[:, :-1]

    def backward(grad):
        grad_mass = grad * additive.data
        grad_previous = grad_mass.copy()
        grad_previous[:, :-1] += grad_mass[:, 1:]
        return grad_previous, grad * mass

    return record("forward_mass", (previous, additive), mass * additive.data, backward)


def attend_forward(previous: Tensor, additive: Tensor,
                   floor: float = FORWARD_ATTENTION_FLOOR) -> Tensor:
    """alpha_t(n) ∝ (alpha_{t-1}(n) + alpha_{t-1}(n-1)) * additive(n)."""
    u = _forward_mass(previous, additive)
    if floor <= 0 and float(u.data.sum()) <= 0:
        raise DegenerateDistribution("forward attention weights sum to zero")
    return renormalize(u, floor)


def initial_alignment(length: int) -> Tensor:
    alpha = np.zeros((1, length))
    alpha[0, 0] = 1.0
    return constant(alpha)


# ============================================================================
# Decoder and proxy loss
# ============================================================================

def decoder_forward(decoder: DecoderModel, memory: Tensor, sa_memory: Tensor | None,
                    frames: np.ndarray) -> tuple[Tensor, list[np.ndarray]]:
    """Teacher-forced decode; returns (mean squared frame error, alignment per step).

    The output projection runs once over all steps; a partial last group is
    masked out of the error.
    """
    p = decoder.params
    r, width = decoder.reduction, decoder.frame_width
    total_frames = frames.shape[0]
    steps = math.ceil(total_frames / r)
    keys = matmul(memory, p["decoder.attn.w_memory"])
    sa_keys = matmul(sa_memory, p["decoder.sa_attn.w_memory"]) if sa_memory is not None else None
    context_width = memory.shape[1] + (sa_memory.shape[1] if sa_memory is not None else 0)

    state = layers.initial_state(decoder.hidden)
    context = constant(np.zeros((1, context_width)))
    alpha = initial_alignment(memory.shape[0])
    previous_frame = constant(np.zeros((1, width)))
    rows = []
    alignments = []
    for step in range(steps):
        state = layers.lstm_cell(p, "decoder.lstm", concat([previous_frame, context], axis=1), state)
        h = slice_axis(state, 1, 0, decoder.hidden)
        additive, _ = attend_additive(h, memory, p["decoder.attn.w_query"],
                                      p["decoder.attn.w_memory"], p["decoder.attn.v"], keys)
        alpha = attend_forward(alpha, additive)
        alignments.append(alpha.data[0].copy())
        context = matmul(alpha, memory)
        if sa_memory is not None:
            _, sa_context = attend_additive(h, sa_memory, p["decoder.sa_attn.w_query"],
                                            p["decoder.sa_attn.w_memory"], p["decoder.sa_attn.v"],
                                            sa_keys)
            context = concat([context, sa_context], axis=1)
        rows.append(concat([h, context], axis=1))
        stop = min((step + 1) * r, total_frames)
        previous_frame = constant(frames[stop - 1:stop])

    prediction = layers.dense(p, "decoder.out", concat(rows, axis=0))
    padded = np.zeros((steps * r, width))
    padded[:total_frames] = frames
    target = constant(padded.reshape(steps, r * width))
    if total_frames % r:
        mask = np.ones((steps, r * width))
        mask[-1, (total_frames % r) * width:] = 0.0
        prediction = mul(prediction, constant(mask))
    return scale(sse(prediction, target), 1.0 / (total_frames * width)), alignments


def proxy_loss(encoder: EncoderModel, decoder: DecoderModel, ids: Sequence[int],
               frames: np.ndarray) -> Tensor:
    memory, sa_memory = encoder_forward(encoder, ids)
    loss, _ = decoder_forward(decoder, memory, sa_memory, frames)
    return loss


def initialize_models(vocab_size: int, config: TtsConfig, seed: int) -> tuple[EncoderModel, DecoderModel]:
    prng = Prng(seed ^ _INIT_SALT)
    encoder = EncoderModel.initialize(vocab_size, config, prng)
    decoder = DecoderModel.initialize(encoder.output_width, config, prng)
    return encoder, decoder


def train_proxy(corpus: Corpus, frames: Mapping[str, np.ndarray], vocab: GraphemeVocab,
                config: TtsConfig, seed: int) -> tuple[EncoderModel, DecoderModel, list[float]]:
    """Fit encoder + decoder to the proxy frames of the train split.

    Only grapheme tokens and the supplied frame arrays are read here. The
    frames come in as a separate argument so that phoneme-derived targets are
    synthesized upstream (build_frames) and the training loop never touches
    utterance.phonemes.
    """
    examples = [
        (u.id, vocab.encode(u.graphemes), frames[u.id])
        for u in corpus.split("train") if u.id in frames and u.graphemes
    ]
    if not examples:
        raise InsufficientData("train split has no utterances with acoustic targets")
    encoder, decoder = initialize_models(len(vocab), config, seed)
    params = {**encoder.params, **decoder.params}
    state = AdamState(lr=config.lr)
    order_prng = Prng(seed)
    curve: list[float] = []
    step = 0
    for epoch in range(config.epochs):
        order = list(range(len(examples)))
        order_prng.shuffle(order)
        total = 0.0
        for index in order:
            step += 1
            utterance_id, ids, target = examples[index]
            zero_grads(params)
            with Tape() as tape:
                loss = proxy_loss(encoder, decoder, ids, target)
            value = loss.item()
            if not math.isfinite(value):
                raise NonFiniteLoss(step)
            tape.backward(loss)
            grads = collect_grads(params)
            norm = clip_grad_norm(grads, config.clip_norm)
            adam_step(params, grads, state)
            total += value
            logging.debug(f"step {step} {utterance_id} loss={value:.6f} grad_norm={norm:.4f}")
        curve.append(total / len(examples))
        logging.info(f"[graphemelab] tts epoch {epoch + 1}/{config.epochs} loss={curve[-1]:.6f}")
    zero_grads(params)
    return encoder, decoder, curve


# ============================================================================
# Embedding extraction and attention diagnostics
# ============================================================================

@dataclass(frozen=True, eq=False)
class EmbeddingRecord:
    vector: np.ndarray
    utterance_id: str
    position: int
    grapheme: str
    label: str


def extract_embeddings(encoder: EncoderModel, corpus: Corpus, split: str,
                       vocab: GraphemeVocab) -> list[EmbeddingRecord]:
    records = []
    for utterance in corpus.split(split):
        if not utterance.graphemes:
            continue
        vectors = encode(encoder, vocab.encode(utterance.graphemes)).data
        for position, (grapheme, label) in enumerate(zip(utterance.graphemes, utterance.labels())):
            records.append(EmbeddingRecord(vectors[position].copy(), utterance.id, position,
                                           grapheme, label))
    return records


def attention_monotonicity(encoder: EncoderModel, decoder: DecoderModel,
                           examples: Sequence[tuple[Sequence[int], np.ndarray]]) -> float:
    """Mean fraction of decoder steps whose attention argmax does not move backward."""
    fractions = []
    for ids, frames in examples:
        memory, sa_memory = encoder_forward(encoder, ids)
        _, alignments = decoder_forward(decoder, memory, sa_memory, frames)
        peaks = [int(np.argmax(a)) for a in alignments]
        if len(peaks) < 2:
            continue
        steady = sum(1 for a, b in zip(peaks, peaks[1:]) if b >= a)
        fractions.append(steady / (len(peaks) - 1))
    return float(np.mean(fractions)) if fractions else 1.0


# ============================================================================
# Checkpoint conversion
# ============================================================================

def models_to_tensors(encoder: EncoderModel, decoder: DecoderModel) -> dict[str, np.ndarray]:
    tensors = {name: t.data for name, t in encoder.params.items()}
    tensors.update({name: t.data for name, t in decoder.params.items()})
    tensors["config.conv_k"] = np.array(float(encoder.conv_k))
    tensors["config.self_attention"] = np.array(float(encoder.self_attention))
    tensors["config.reduction"] = np.array(float(decoder.reduction))
    tensors["config.frame_width"] = np.array(float(decoder.frame_width))
    return tensors


def models_from_tensors(tensors: Mapping[str, np.ndarray]) -> tuple[EncoderModel, DecoderModel]:
    def params(prefix: str) -> dict[str, Tensor]:
        return {name: parameter(value, name) for name, value in tensors.items()
                if name.startswith(prefix)}

    self_attention = bool(tensors["config.self_attention"])
    encoder = EncoderModel(params("encoder."), int(tensors["config.conv_k"]), self_attention)
    decoder = DecoderModel(params("decoder."), int(tensors["config.reduction"]),
                           int(tensors["config.frame_width"]), self_attention)
    return encoder, decoder
