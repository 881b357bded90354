"""Shared fixtures: a hand-written micro corpus and tiny model configurations."""

import numpy as np
import pytest

from graphemelab.corpus import Corpus, build_vocabs, make_utterance
from graphemelab.tts import TtsConfig, build_acoustic_spec, build_frames

TRAIN_TEXTS = (
    "le chat boit du lait.",
    "les enfants sont ici, bien.",
    "un bon vin rouge?",
    "nous chantons encore!",
    "la porte est ouverte.",
    "des amis vont en ville.",
)
# dev and test reuse train sentences so the closed vocabulary always holds
DEV_TEXTS = (TRAIN_TEXTS[0], TRAIN_TEXTS[2])
TEST_TEXTS = (TRAIN_TEXTS[1], TRAIN_TEXTS[5])


def make_corpus() -> Corpus:
    utterances = []
    splits: dict[str, list[str]] = {"train": [], "dev": [], "test": []}
    for name, texts in (("train", TRAIN_TEXTS), ("dev", DEV_TEXTS), ("test", TEST_TEXTS)):
        for text in texts:
            utterance_id = f"u{len(utterances):05d}"
            utterances.append(make_utterance(utterance_id, text))
            splits[name].append(utterance_id)
    return Corpus(tuple(utterances), {k: tuple(v) for k, v in splits.items()})


@pytest.fixture
def corpus() -> Corpus:
    return make_corpus()


@pytest.fixture
def vocabs(corpus):
    return build_vocabs(corpus)


@pytest.fixture
def micro_tts_config() -> TtsConfig:
    return TtsConfig(embed_dim=8, conv_k=3, conv_channels=4, hidden=8, decoder_hidden=8,
                     attention_dim=4, reduction=2, frame_width=4, lr=1e-2, epochs=2)


@pytest.fixture
def frames(corpus, vocabs, micro_tts_config) -> dict[str, np.ndarray]:
    _, phonemes = vocabs
    spec = build_acoustic_spec(phonemes, micro_tts_config.frame_width, seed=7)
    return build_frames(corpus, spec, seed=7)
