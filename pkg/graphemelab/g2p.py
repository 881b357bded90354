"""
G2P probe: a shallow CTC phoneme predictor over graphemes or frozen embeddings.

A single unidirectional LSTM layer feeds a linear projection onto the phoneme
inventory plus the CTC blank. The input is either one-hot raw graphemes or the
contextual embeddings produced by tts.encode; comparing the two measures how
much pronunciation knowledge the acoustic-proxy encoder picked up.

    utterance --featurize--> [T x width] --LSTM--> [T x H] --dense--> [T x (V_p + 1)]
                                                                        |
                                      train: ctc_loss    predict: greedy_decode
"""

import logging
import math
from dataclasses import dataclass, field, replace
from enum import StrEnum
from typing import Sequence

import numpy as np

from graphemelab import layers
from graphemelab.corpus import Corpus, GraphemeVocab, PhonemeVocab, Utterance
from graphemelab.ctc import ctc_loss, greedy_decode, required_frames
from graphemelab.errors import (
    AllUtterancesSkipped,
    ConfigError,
    EmptyReference,
    MissingEncoder,
    NonFiniteLoss,
    WidthMismatch,
)
from graphemelab.metrics import CorpusPer, corpus_per, levenshtein_align, paired_permutation_test
from graphemelab.numerics import (
    AdamState,
    Prng,
    Tape,
    Tensor,
    adam_step,
    collect_grads,
    constant,
    log_softmax,
    parameter,
    zero_grads,
)
from graphemelab.tts import EncoderModel, encode

_INIT_SALT = 0x960BE
# the per-epoch curve scores this many dev utterances; final PER always uses the full split
CURVE_DEV_UTTERANCES = 100


class ProbeMode(StrEnum):
    RAW = "raw"
    EMBEDDING = "embedding"


class TrainSplit(StrEnum):
    TRAIN = "train"
    DEV = "dev"


@dataclass(frozen=True)
class ProbeConfig:
    epochs: int = 20
    lr: float = 5e-3
    seed: int = 0
    mode: ProbeMode = ProbeMode.EMBEDDING
    split: TrainSplit = TrainSplit.TRAIN
    hidden: int = 64

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError(f"probe epochs must be >= 0, got {self.epochs}")
        if self.lr <= 0:
            raise ConfigError(f"probe learning rate must be positive, got {self.lr}")
        if self.hidden < 1:
            raise ConfigError(f"probe hidden size must be >= 1, got {self.hidden}")
        try:
            object.__setattr__(self, "mode", ProbeMode(self.mode))
            object.__setattr__(self, "split", TrainSplit(self.split))
        except ValueError as exc:
            raise ConfigError(str(exc)) from None


@dataclass
class ProbeModel:
    params: dict[str, Tensor]
    mode: ProbeMode

    @property
    def input_width(self) -> int:
        return self.params["probe.lstm.w_input"].shape[0]

    @property
    def output_width(self) -> int:
        return self.params["probe.out.w"].shape[1]

    @classmethod
    def initialize(cls, input_width: int, output_width: int, hidden: int, mode: ProbeMode,
                   prng: Prng) -> "ProbeModel":
        params: dict[str, Tensor] = {}
        layers.add_lstm(params, "probe.lstm", input_width, hidden, prng)
        layers.add_dense(params, "probe.out", hidden, output_width, prng)
        return cls(params, ProbeMode(mode))

    def to_tensors(self) -> dict[str, np.ndarray]:
        tensors = {name: t.data for name, t in self.params.items()}
        tensors["config.mode_embedding"] = np.array(float(self.mode is ProbeMode.EMBEDDING))
        return tensors

    @classmethod
    def from_tensors(cls, tensors: dict[str, np.ndarray]) -> "ProbeModel":
        params = {name: parameter(value, name) for name, value in tensors.items()
                  if name.startswith("probe.")}
        mode = ProbeMode.EMBEDDING if float(tensors["config.mode_embedding"]) else ProbeMode.RAW
        return cls(params, mode)


@dataclass
class ProbeRun:
    model: ProbeModel
    curve: list[float] = field(default_factory=list)
    skipped: int = 0


# ============================================================================
# Features and forward pass
# ============================================================================

def featurize(utterance: Utterance, mode: ProbeMode, vocab: GraphemeVocab,
              encoder: EncoderModel | None = None) -> np.ndarray:
    ids = vocab.encode(utterance.graphemes)
    if mode == ProbeMode.RAW:
        features = np.zeros((len(ids), len(vocab)))
        features[np.arange(len(ids)), ids] = 1.0
        return features
    if encoder is None:
        raise MissingEncoder("embedding-mode features need a trained encoder")
    if not ids:
        return np.zeros((0, encoder.output_width))
    return encode(encoder, ids).data


def probe_logits(model: ProbeModel, features: np.ndarray) -> Tensor:
    if features.ndim != 2 or features.shape[1] != model.input_width:
        raise WidthMismatch(model.input_width, features.shape[-1])
    hidden = layers.run_lstm(model.params, "probe.lstm", constant(features))
    return layers.dense(model.params, "probe.out", hidden)


def probe_loss(model: ProbeModel, features: np.ndarray, target: Sequence[int]) -> Tensor:
    return ctc_loss(probe_logits(model, features), target)


def probe_predict(model: ProbeModel, features: np.ndarray) -> list[int]:
    """Greedy CTC decode; returns phoneme ids."""
    if features.shape[0] == 0:
        if features.ndim == 2 and features.shape[1] != model.input_width:
            raise WidthMismatch(model.input_width, features.shape[1])
        return []
    return greedy_decode(log_softmax(probe_logits(model, features)).data)


# ============================================================================
# Training and evaluation
# ============================================================================

@dataclass(frozen=True)
class PerRow:
    utterance_id: str
    reference: tuple[str, ...]
    hypothesis: tuple[str, ...]
    rate: float


@dataclass(frozen=True)
class Evaluation:
    summary: CorpusPer
    rows: tuple[PerRow, ...]


def _featurize_split(utterances: Sequence[Utterance], mode: ProbeMode, vocab: GraphemeVocab,
                     encoder: EncoderModel | None) -> list[np.ndarray]:
    return [featurize(u, mode, vocab, encoder) for u in utterances]


def _evaluate_features(model: ProbeModel, utterances: Sequence[Utterance],
                       features: Sequence[np.ndarray], phonemes: PhonemeVocab) -> Evaluation:
    rows = []
    for utterance, feats in sorted(zip(utterances, features), key=lambda pair: pair[0].id):
        if not utterance.phonemes:
            continue
        hypothesis = tuple(phonemes.decode(probe_predict(model, feats)))
        distance = levenshtein_align(utterance.phonemes, hypothesis).distance
        rows.append(PerRow(utterance.id, utterance.phonemes, hypothesis,
                           distance / len(utterance.phonemes)))
    summary = corpus_per((r.utterance_id, r.reference, r.hypothesis) for r in rows)
    return Evaluation(summary, tuple(rows))


def evaluate_probe(model: ProbeModel, corpus: Corpus, split: str, graphemes: GraphemeVocab,
                   phonemes: PhonemeVocab, encoder: EncoderModel | None = None) -> Evaluation:
    """PER of the probe on a split, in utterance id order; all-silent utterances are left out."""
    utterances = [u for u in corpus.split(split) if u.phonemes]
    if not utterances:
        raise EmptyReference()
    features = _featurize_split(utterances, model.mode, graphemes, encoder)
    return _evaluate_features(model, utterances, features, phonemes)


def train_probe(corpus: Corpus, config: ProbeConfig, graphemes: GraphemeVocab,
                phonemes: PhonemeVocab, encoder: EncoderModel | None = None) -> ProbeRun:
    """Fit a probe with CTC.

    The returned curve holds the micro PER after each epoch on the first
    CURVE_DEV_UTTERANCES dev utterances (id order).
    """
    if config.mode == ProbeMode.RAW:
        encoder = None
    elif encoder is None:
        raise MissingEncoder("embedding-mode probe needs a trained encoder")

    examples = []
    skipped = 0
    for utterance in corpus.split(config.split.value):
        target = phonemes.encode(utterance.phonemes)
        if not utterance.graphemes or required_frames(target) > len(utterance.graphemes):
            skipped += 1
            logging.debug(f"Skipping {utterance.id}: {len(target)} phonemes "
                          f"over {len(utterance.graphemes)} frames")
            continue
        examples.append((utterance.id, featurize(utterance, config.mode, graphemes, encoder), target))
    if not examples:
        raise AllUtterancesSkipped(skipped)
    if skipped:
        logging.warning(f"[graphemelab] probe skipped {skipped} utterances violating the CTC length rule")

    input_width = examples[0][1].shape[1]
    model = ProbeModel.initialize(input_width, len(phonemes) + 1, config.hidden, config.mode,
                                  Prng(config.seed ^ _INIT_SALT))
    run = ProbeRun(model, [], skipped)
    if config.epochs == 0:
        return run

    dev = sorted((u for u in corpus.split("dev") if u.phonemes), key=lambda u: u.id)[:CURVE_DEV_UTTERANCES]
    dev_features = _featurize_split(dev, config.mode, graphemes, encoder)
    state = AdamState(lr=config.lr)
    order_prng = Prng(config.seed)
    step = 0
    for epoch in range(config.epochs):
        order = list(range(len(examples)))
        order_prng.shuffle(order)
        total = 0.0
        for index in order:
            step += 1
            _, features, target = examples[index]
            zero_grads(model.params)
            with Tape() as tape:
                loss = probe_loss(model, features, target)
            value = loss.item()
            if not math.isfinite(value):
                raise NonFiniteLoss(step)
            tape.backward(loss)
            adam_step(model.params, collect_grads(model.params), state)
            total += value
        dev_per = _evaluate_features(model, dev, dev_features, phonemes).summary.micro if dev else 0.0
        run.curve.append(dev_per)
        logging.info(f"[graphemelab] probe {config.mode}/{config.split} epoch {epoch + 1}/{config.epochs} "
                     f"ctc={total / len(examples):.4f} dev_per={dev_per:.4f}")
    zero_grads(model.params)
    return run


# ============================================================================
# PER grid: {raw, embedding} x {train, dev}
# ============================================================================

@dataclass(frozen=True)
class Table2Cell:
    mode: ProbeMode
    split: TrainSplit
    evaluation: Evaluation
    skipped: int
    run: ProbeRun = field(compare=False, repr=False)


@dataclass(frozen=True)
class Table2Result:
    cells: tuple[Table2Cell, ...]
    p_values: dict[TrainSplit, float]

    def cell(self, mode: ProbeMode, split: TrainSplit) -> Table2Cell:
        for c in self.cells:
            if c.mode == mode and c.split == split:
                return c
        raise KeyError((mode, split))


def run_table2(corpus: Corpus, encoder: EncoderModel, graphemes: GraphemeVocab,
               phonemes: PhonemeVocab, base: ProbeConfig) -> Table2Result:
    """Train the four probes and evaluate each on the test split."""
    cells = []
    for split in TrainSplit:
        for mode in ProbeMode:
            config = replace(base, mode=mode, split=split)
            logging.info(f"[graphemelab] table2 probe mode={mode} split={split}")
            run = train_probe(corpus, config, graphemes, phonemes, encoder)
            evaluation = evaluate_probe(run.model, corpus, "test", graphemes, phonemes, encoder)
            cells.append(Table2Cell(mode, split, evaluation, run.skipped, run))
    result = Table2Result(tuple(cells), {})
    for split in TrainSplit:
        raw = result.cell(ProbeMode.RAW, split).evaluation.rows
        emb = result.cell(ProbeMode.EMBEDDING, split).evaluation.rows
        result.p_values[split] = paired_permutation_test([r.rate for r in raw], [r.rate for r in emb],
                                                         seed=base.seed)
    return result
