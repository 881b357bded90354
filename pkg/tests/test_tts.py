from dataclasses import replace

import numpy as np
import pytest

from graphemelab.corpus import Utterance
from graphemelab.errors import (
    ConfigError,
    DegenerateDistribution,
    EmptyPhonemeSequence,
    InsufficientData,
    NonFiniteLoss,
)
from graphemelab.numerics import (
    Prng,
    Tape,
    add,
    constant,
    grad_check,
    matmul,
    mul,
    parameter,
    reduce_sum,
    softmax,
    tanh,
)
from graphemelab.tts import (
    DURATIONS,
    AcousticSpec,
    TtsConfig,
    additive_weights,
    attend_additive,
    attend_forward,
    attention_monotonicity,
    build_acoustic_spec,
    encode,
    encoder_forward,
    extract_embeddings,
    initial_alignment,
    initialize_models,
    models_from_tensors,
    models_to_tensors,
    proxy_loss,
    synth_target,
    train_proxy,
    utterance_seed,
)


def assert_gradients_match(loss_fn, params, entries=40, seed=0, h=1e-5, rtol=1e-4):
    """Compare tape gradients against central differences on sampled entries."""
    for tensor in params.values():
        tensor.grad = None
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    analytic = {name: t.grad if t.grad is not None else np.zeros_like(t.data)
                for name, t in params.items()}
    flat = [(name, j) for name, t in params.items() for j in range(t.data.size)]
    prng = Prng(seed)
    for k in prng.sample(len(flat), min(entries, len(flat))):
        name, j = flat[k]
        tensor = params[name]
        original = float(tensor.data.flat[j])
        tensor.data.flat[j] = original + h
        plus = loss_fn().item()
        tensor.data.flat[j] = original - h
        minus = loss_fn().item()
        tensor.data.flat[j] = original
        numeric = (plus - minus) / (2 * h)
        np.testing.assert_allclose(analytic[name].flat[j], numeric, rtol=rtol, atol=1e-8,
                                   err_msg=f"{name}[{j}]")


def single_phoneme_spec(code, duration=2, noise=0.0) -> AcousticSpec:
    codes = np.array([code], dtype=np.float64)
    return AcousticSpec(codes.shape[1], codes, (duration,), {"a": 0}, noise=noise)


# ============================================================================
# Acoustic proxy targets
# ============================================================================

def test_single_phoneme_target_fades_on_last_frame():
    spec = single_phoneme_spec([1.0, -2.0])
    frames = synth_target(Utterance("u0", ("a",), ("a",)), spec, seed=0)
    np.testing.assert_allclose(frames, [[1.0, -2.0], [0.75, -1.5]])


def test_last_frame_blends_toward_next_phoneme():
    codes = np.array([[1.0, 0.0], [0.0, 1.0]])
    spec = AcousticSpec(2, codes, (2, 3), {"a": 0, "b": 1}, noise=0.0)
    frames = synth_target(Utterance("u0", ("a", "b"), ("a", "b")), spec, seed=0)
    assert frames.shape == (5, 2)
    np.testing.assert_allclose(frames[1], [0.75, 0.25])
    np.testing.assert_allclose(frames[4], [0.0, 0.75])


def test_target_noise_is_keyed_by_utterance():
    spec = single_phoneme_spec([1.0, -2.0], noise=0.05)
    first = synth_target(Utterance("u0", ("a",), ("a",)), spec, seed=3)
    again = synth_target(Utterance("u0", ("a",), ("a",)), spec, seed=3)
    other = synth_target(Utterance("u1", ("a",), ("a",)), spec, seed=3)
    np.testing.assert_array_equal(first, again)
    assert not np.array_equal(first, other)
    assert utterance_seed("u0", 3) != utterance_seed("u0", 4)


def test_silent_utterance_has_no_target():
    with pytest.raises(EmptyPhonemeSequence) as info:
        synth_target(Utterance("u9", (".",), ()), single_phoneme_spec([1.0]), seed=0)
    assert info.value.utterance_id == "u9"


def test_acoustic_spec_covers_every_phoneme(vocabs):
    _, phonemes = vocabs
    spec = build_acoustic_spec(phonemes, 6, seed=1)
    assert spec.codes.shape == (len(phonemes), 6)
    assert set(spec.durations) <= set(DURATIONS)
    np.testing.assert_array_equal(spec.codes, build_acoustic_spec(phonemes, 6, seed=1).codes)


def test_frames_follow_durations(corpus, vocabs, frames):
    _, phonemes = vocabs
    spec = build_acoustic_spec(phonemes, 4, seed=7)
    for utterance in corpus.utterances:
        expected = sum(spec.durations[spec.index[p]] for p in utterance.phonemes)
        assert frames[utterance.id].shape == (expected, 4)


# ============================================================================
# Attention
# ============================================================================

def test_forward_attention_advances_at_most_one_step():
    out = attend_forward(constant([[1.0, 0.0, 0.0]]), constant([[1 / 3, 1 / 3, 1 / 3]]))
    np.testing.assert_allclose(out.data, [[0.5, 0.5, 0.0]], atol=1e-9)
    assert out.data.sum() == pytest.approx(1.0)


def test_forward_attention_single_position():
    out = attend_forward(initial_alignment(1), constant([[1.0]]))
    np.testing.assert_allclose(out.data, [[1.0]])


def test_forward_attention_without_floor_can_degenerate():
    with pytest.raises(DegenerateDistribution):
        attend_forward(constant([[0.0, 0.0, 1.0]]), constant([[0.5, 0.5, 0.0]]), floor=0.0)


def test_additive_attention_is_a_distribution():
    prng = Prng(2)
    memory = constant(prng.gaussian_array((5, 6)))
    weights, context = attend_additive(
        constant(prng.gaussian_array((1, 4))), memory,
        constant(prng.gaussian_array((4, 3))), constant(prng.gaussian_array((6, 3))),
        constant(prng.gaussian_array((1, 3))))
    assert weights.shape == (1, 5)
    assert weights.data.sum() == pytest.approx(1.0)
    np.testing.assert_allclose(context.data, weights.data @ memory.data)


def test_fused_additive_scores_match_primitives():
    prng = Prng(5)
    keys = constant(prng.gaussian_array((6, 3)))
    query = constant(prng.gaussian_array((1, 3)))
    v = constant(prng.gaussian_array((1, 3)))
    expected = softmax(matmul(v, tanh(add(keys, query)), transpose_b=True))
    np.testing.assert_allclose(additive_weights(keys, query, v).data, expected.data, rtol=1e-12)


def test_attention_gradients():
    prng = Prng(12)
    state = parameter(prng.gaussian_array((1, 4)), "state")
    memory = parameter(prng.gaussian_array((5, 6)), "memory")
    w_query = parameter(prng.gaussian_array((4, 3)), "w_query")
    w_memory = parameter(prng.gaussian_array((6, 3)), "w_memory")
    v = parameter(prng.gaussian_array((1, 3)), "v")
    previous = parameter(prng.uniform_array((1, 5)) + 0.1, "previous")
    alpha_weights = constant(prng.gaussian_array((1, 5)))
    context_weights = constant(prng.gaussian_array((1, 6)))

    def f(_):
        additive, context = attend_additive(state, memory, w_query, w_memory, v)
        alpha = attend_forward(previous, additive)
        return add(add(reduce_sum(mul(alpha, alpha_weights)), reduce_sum(mul(context, context_weights))),
                   reduce_sum(mul(matmul(alpha, memory), context_weights)))

    assert grad_check(f, [state, memory, w_query, w_memory, v, previous]) <= 1e-5


# ============================================================================
# Encoder and decoder
# ============================================================================

def test_encoder_output_shape(vocabs, micro_tts_config):
    graphemes, _ = vocabs
    encoder, _ = initialize_models(len(graphemes), micro_tts_config, seed=0)
    ids = graphemes.encode(list("le chat."))
    assert encode(encoder, ids).shape == (8, 2 * micro_tts_config.hidden)
    assert encoder.output_width == 16


def test_tts_config_rejects_bad_sizes():
    with pytest.raises(ConfigError):
        TtsConfig(reduction=0)
    with pytest.raises(ConfigError):
        TtsConfig(lr=0.0)
    with pytest.raises(ConfigError):
        TtsConfig(epochs=-1)


def test_embeddings_are_deterministic_and_contextual(vocabs, micro_tts_config):
    graphemes, _ = vocabs
    encoder, _ = initialize_models(len(graphemes), micro_tts_config, seed=0)
    ids = graphemes.encode(list("le chat boit."))
    first = encode(encoder, ids).data
    np.testing.assert_array_equal(first, encode(encoder, ids).data)
    permuted = ids[:1] + ids[1:][::-1]
    assert permuted != ids
    assert not np.allclose(encode(encoder, permuted).data[0], first[0])


def test_self_attention_output_is_residual(vocabs, micro_tts_config):
    graphemes, _ = vocabs
    config = replace(micro_tts_config, self_attention=True)
    encoder, _ = initialize_models(len(graphemes), config, seed=0)
    output, attended = encoder_forward(encoder, graphemes.encode(list("un vin")))
    assert attended.shape == output.shape
    assert not np.array_equal(attended.data, output.data)


def test_proxy_loss_gradients(corpus, vocabs, frames, micro_tts_config):
    graphemes, _ = vocabs
    encoder, decoder = initialize_models(len(graphemes), micro_tts_config, seed=1)
    utterance = corpus.split("train")[2]
    ids = graphemes.encode(utterance.graphemes)
    params = {**encoder.params, **decoder.params}
    assert_gradients_match(lambda: proxy_loss(encoder, decoder, ids, frames[utterance.id]), params)


def test_proxy_loss_gradients_with_self_attention(corpus, vocabs, frames, micro_tts_config):
    graphemes, _ = vocabs
    config = replace(micro_tts_config, self_attention=True)
    encoder, decoder = initialize_models(len(graphemes), config, seed=2)
    utterance = corpus.split("train")[0]
    ids = graphemes.encode(utterance.graphemes)
    params = {**encoder.params, **decoder.params}
    assert_gradients_match(lambda: proxy_loss(encoder, decoder, ids, frames[utterance.id]),
                           params, seed=1)


def test_proxy_loss_gradients_over_three_sentences(corpus, vocabs, frames, micro_tts_config):
    graphemes, _ = vocabs
    encoder, decoder = initialize_models(len(graphemes), micro_tts_config, seed=4)
    utterances = corpus.split("train")[:3]

    def loss():
        total = None
        for u in utterances:
            value = proxy_loss(encoder, decoder, graphemes.encode(u.graphemes), frames[u.id])
            total = value if total is None else add(total, value)
        return total

    assert_gradients_match(loss, {**encoder.params, **decoder.params}, entries=120, seed=3, rtol=1e-3)


def test_partial_last_frame_group(vocabs, micro_tts_config):
    graphemes, _ = vocabs
    encoder, decoder = initialize_models(len(graphemes), micro_tts_config, seed=0)
    target = Prng(4).gaussian_array((5, micro_tts_config.frame_width))
    loss = proxy_loss(encoder, decoder, graphemes.encode(list("vin")), target)
    assert np.isfinite(loss.item()) and loss.item() > 0


# ============================================================================
# Training
# ============================================================================

def test_training_is_deterministic(corpus, vocabs, frames, micro_tts_config):
    graphemes, _ = vocabs
    first_encoder, _, first_curve = train_proxy(corpus, frames, graphemes, micro_tts_config, seed=5)
    second_encoder, _, second_curve = train_proxy(corpus, frames, graphemes, micro_tts_config, seed=5)
    assert first_curve == second_curve
    assert len(first_curve) == micro_tts_config.epochs
    for name, tensor in first_encoder.params.items():
        np.testing.assert_array_equal(tensor.data, second_encoder.params[name].data)


def test_training_never_reads_phonemes(corpus, vocabs, frames, micro_tts_config):
    graphemes, _ = vocabs
    scrambled = replace(corpus, utterances=tuple(
        replace(u, phonemes=tuple(reversed(u.phonemes)), alignment=None) for u in corpus.utterances
    ))
    _, _, clean = train_proxy(corpus, frames, graphemes, micro_tts_config, seed=5)
    _, _, blind = train_proxy(scrambled, frames, graphemes, micro_tts_config, seed=5)
    assert clean == blind


def test_zero_epochs_returns_initial_models(corpus, vocabs, frames, micro_tts_config):
    graphemes, _ = vocabs
    config = replace(micro_tts_config, epochs=0)
    encoder, _, curve = train_proxy(corpus, frames, graphemes, config, seed=5)
    initial, _ = initialize_models(len(graphemes), config, seed=5)
    assert curve == []
    for name, tensor in encoder.params.items():
        np.testing.assert_array_equal(tensor.data, initial.params[name].data)


def test_training_reduces_loss(corpus, vocabs, frames, micro_tts_config):
    graphemes, _ = vocabs
    config = replace(micro_tts_config, epochs=6)
    _, _, curve = train_proxy(corpus, frames, graphemes, config, seed=0)
    assert curve[-1] < curve[0]


def test_training_stops_on_non_finite_loss(corpus, vocabs, frames, micro_tts_config):
    graphemes, _ = vocabs
    poisoned = {key: np.full_like(value, np.nan) for key, value in frames.items()}
    with pytest.raises(NonFiniteLoss) as info:
        train_proxy(corpus, poisoned, graphemes, micro_tts_config, seed=0)
    assert info.value.step == 1


def test_training_needs_targets(corpus, vocabs, micro_tts_config):
    graphemes, _ = vocabs
    with pytest.raises(InsufficientData):
        train_proxy(corpus, {}, graphemes, micro_tts_config, seed=0)


# ============================================================================
# Embeddings and diagnostics
# ============================================================================

def test_extract_embeddings_labels_every_grapheme(corpus, vocabs, micro_tts_config):
    graphemes, _ = vocabs
    encoder, _ = initialize_models(len(graphemes), micro_tts_config, seed=0)
    records = extract_embeddings(encoder, corpus, "dev", graphemes)
    dev = corpus.split("dev")
    assert len(records) == sum(len(u.graphemes) for u in dev)
    first = records[0]
    assert (first.utterance_id, first.position, first.grapheme) == (dev[0].id, 0, dev[0].graphemes[0])
    assert first.label == dev[0].labels()[0]
    assert first.vector.shape == (2 * micro_tts_config.hidden,)


def test_attention_monotonicity_is_a_fraction(corpus, vocabs, frames, micro_tts_config):
    graphemes, _ = vocabs
    encoder, decoder = initialize_models(len(graphemes), micro_tts_config, seed=0)
    examples = [(graphemes.encode(u.graphemes), frames[u.id]) for u in corpus.split("dev")]
    assert 0.0 <= attention_monotonicity(encoder, decoder, examples) <= 1.0
    assert attention_monotonicity(encoder, decoder, []) == 1.0


def test_models_survive_tensor_conversion(corpus, vocabs, frames, micro_tts_config):
    graphemes, _ = vocabs
    config = replace(micro_tts_config, self_attention=True)
    encoder, decoder = initialize_models(len(graphemes), config, seed=3)
    restored_encoder, restored_decoder = models_from_tensors(models_to_tensors(encoder, decoder))
    utterance = corpus.split("train")[1]
    ids = graphemes.encode(utterance.graphemes)
    assert proxy_loss(encoder, decoder, ids, frames[utterance.id]).item() == \
        proxy_loss(restored_encoder, restored_decoder, ids, frames[utterance.id]).item()
