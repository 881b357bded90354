"""
Analysis: what the contextual grapheme embeddings encode.

- tsne_embed: exact t-SNE projection to 2-D (perplexity bisection, early
  exaggeration, momentum with per-coordinate gains)
- knn_purity: share of each embedding's k nearest neighbors with the same gold
  phoneme, per grapheme, per phoneme and overall
- swap_and_probe / swap_experiment: transplant one grapheme's embedding into
  another sentence and see whether the probe now reads the donor's phoneme
- export_table / read_table: tab-separated records for external plotting

Usage:
    records = extract_embeddings(encoder, corpus, "test", vocab)
    report = knn_purity(records, k=10)
    result = tsne_embed(np.stack([r.vector for r in records]), TsneConfig(seed=1))
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from graphemelab.corpus import (
    LETTERS,
    PUNCTUATION,
    SILENT,
    SPACE,
    VOWELS,
    Corpus,
    GraphemeVocab,
    PhonemeVocab,
    Utterance,
    phonetize_toy,
    phonetize_trace,
    write_text_atomic,
)
from graphemelab.errors import (
    ConfigError,
    InsufficientData,
    IoFailure,
    PerplexityInfeasible,
    PositionOutOfRange,
    TooFewRecords,
    WrongProbeMode,
)
from graphemelab.g2p import ProbeMode, ProbeModel, probe_predict
from graphemelab.metrics import levenshtein_align
from graphemelab.numerics import Prng
from graphemelab.tts import EmbeddingRecord, EncoderModel, encode

MACHINE_EPSILON = np.finfo(np.float64).eps
EXAGGERATION = 12.0
EXAGGERATION_ITERATIONS = 250
BISECTION_STEPS = 50
ENTROPY_TOLERANCE = 1e-5
FEASIBILITY_TOLERANCE = 1e-3
MIN_GAIN = 0.01
_BLOCK = 512


# ============================================================================
# t-SNE
# ============================================================================

@dataclass(frozen=True)
class TsneConfig:
    perplexity: float = 30.0
    iterations: int = 1000
    learning_rate: float = 200.0
    seed: int = 0

    def __post_init__(self):
        if self.iterations < EXAGGERATION_ITERATIONS:
            raise ConfigError(f"t-SNE needs at least {EXAGGERATION_ITERATIONS} iterations, got {self.iterations}")
        if self.perplexity <= 1.0:
            raise PerplexityInfeasible(f"perplexity must exceed 1, got {self.perplexity}")


@dataclass(frozen=True)
class TsneResult:
    points: np.ndarray
    kl_history: tuple[float, ...]


def squared_distances(x: np.ndarray) -> np.ndarray:
    norms = (x * x).sum(axis=1)
    return np.maximum(norms[:, None] + norms[None, :] - 2.0 * (x @ x.T), 0.0)


def _row_entropy(scaled: np.ndarray, beta: np.ndarray,
                 off_diagonal: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    weights = np.where(off_diagonal, np.exp(-scaled * beta[:, None]), 0.0)
    total = weights.sum(axis=1)
    probs = weights / total[:, None]
    entropy = np.log(total) + beta * (scaled * probs).sum(axis=1)
    return probs, entropy


def conditional_affinities(sq_distances: np.ndarray, perplexity: float) -> tuple[np.ndarray, np.ndarray]:
    """Rows p_{j|i} whose Shannon entropy (nats) matches log(perplexity).

    The precision of each row is found by bisection, all rows at once. Distances
    are rescaled per row before the search; the affinities do not depend on it.
    """
    n = sq_distances.shape[0]
    if n < 2:
        raise PerplexityInfeasible("t-SNE needs at least two points")
    target = math.log(perplexity)
    off_diagonal = ~np.eye(n, dtype=bool)
    distances = sq_distances.astype(np.float64)
    shift = np.where(off_diagonal, distances, np.inf).min(axis=1)
    scaled = np.where(off_diagonal, distances - shift[:, None], 0.0)
    spread = scaled.sum(axis=1) / (n - 1)
    spread = np.where(spread > 0, spread, 1.0)
    scaled = scaled / spread[:, None]

    beta = np.ones(n)
    low = np.full(n, -np.inf)
    high = np.full(n, np.inf)
    probs, entropy = _row_entropy(scaled, beta, off_diagonal)
    for _ in range(BISECTION_STEPS):
        diff = entropy - target
        if np.all(np.abs(diff) < ENTROPY_TOLERANCE):
            break
        too_flat = diff > 0
        low = np.where(too_flat, beta, low)
        high = np.where(too_flat, high, beta)
        beta = np.where(
            too_flat,
            np.where(np.isinf(high), beta * 2.0, (beta + high) / 2.0),
            np.where(np.isinf(low), beta / 2.0, (beta + low) / 2.0),
        )
        probs, entropy = _row_entropy(scaled, beta, off_diagonal)
    miss = np.abs(entropy - target)
    if np.any(miss > FEASIBILITY_TOLERANCE):
        raise PerplexityInfeasible(
            f"perplexity {perplexity} unreachable for {int((miss > FEASIBILITY_TOLERANCE).sum())} of {n} points"
        )
    return probs, entropy


def joint_affinities(vectors: np.ndarray, perplexity: float) -> np.ndarray:
    conditional, _ = conditional_affinities(squared_distances(vectors), perplexity)
    joint = (conditional + conditional.T) / (2.0 * vectors.shape[0])
    return np.maximum(joint, MACHINE_EPSILON)


def kl_gradient(points: np.ndarray, joint: np.ndarray, exaggeration: float = 1.0) -> tuple[float, np.ndarray]:
    """KL(P || Q) for Student-t Q and its gradient with respect to the points."""
    kernel = 1.0 / (1.0 + squared_distances(points))
    np.fill_diagonal(kernel, 0.0)
    q = np.maximum(kernel / kernel.sum(), MACHINE_EPSILON)
    off_diagonal = ~np.eye(points.shape[0], dtype=bool)
    kl = float((joint * np.log(joint / q))[off_diagonal].sum())
    weights = (exaggeration * joint - q) * kernel
    np.fill_diagonal(weights, 0.0)
    grad = 4.0 * (weights.sum(axis=1)[:, None] * points - weights @ points)
    return kl, grad


def optimize_embedding(joint: np.ndarray, config: TsneConfig) -> TsneResult:
    """Gradient descent on KL(P || Q) from a seeded start: early exaggeration, momentum and gains."""
    n = joint.shape[0]
    points = Prng(config.seed).gaussian_array((n, 2)) * 1e-4
    update = np.zeros_like(points)
    gains = np.ones_like(points)
    history = []
    for iteration in range(config.iterations):
        early = iteration < EXAGGERATION_ITERATIONS
        momentum = 0.5 if early else 0.8
        kl, grad = kl_gradient(points, joint, EXAGGERATION if early else 1.0)
        history.append(kl)
        increase = update * grad < 0.0
        gains = np.where(increase, gains + 0.2, gains * 0.8)
        np.clip(gains, MIN_GAIN, np.inf, out=gains)
        update = momentum * update - config.learning_rate * gains * grad
        points = points + update
        points = points - points.mean(axis=0)
        if (iteration + 1) % 100 == 0:
            logging.debug(f"t-SNE iteration {iteration + 1}: KL={kl:.6f}")
    logging.info(f"[graphemelab] t-SNE done: n={n} KL={history[-1]:.6f}")
    return TsneResult(points, tuple(history))


def tsne_embed(vectors: np.ndarray, config: TsneConfig) -> TsneResult:
    """Exact t-SNE of the rows of vectors into two dimensions; needs perplexity < n / 3."""
    vectors = np.asarray(vectors, dtype=np.float64)
    n = vectors.shape[0]
    if config.perplexity >= n / 3:
        raise PerplexityInfeasible(f"perplexity {config.perplexity} needs more than {3 * config.perplexity:g} "
                                   f"points, got {n}")
    return optimize_embedding(joint_affinities(vectors, config.perplexity), config)


# ============================================================================
# k-NN phoneme purity
# ============================================================================

@dataclass(frozen=True)
class PurityReport:
    k: int
    overall: float
    per_grapheme: dict[str, float]
    per_phoneme: dict[str, float]
    per_record: np.ndarray = field(repr=False)


def nearest_neighbors(vectors: np.ndarray, k: int) -> np.ndarray:
    """Indices [n x k] of each row's k nearest rows, self excluded, ties by index."""
    n = vectors.shape[0]
    norms = (vectors * vectors).sum(axis=1)
    result = np.empty((n, k), dtype=np.int64)
    for start in range(0, n, _BLOCK):
        stop = min(start + _BLOCK, n)
        block = norms[start:stop, None] + norms[None, :] - 2.0 * (vectors[start:stop] @ vectors.T)
        block = np.maximum(block, 0.0)
        block[np.arange(stop - start), np.arange(start, stop)] = np.inf
        result[start:stop] = np.argsort(block, axis=1, kind="stable")[:, :k]
    return result


def _group_means(keys: Sequence[str], values: np.ndarray) -> dict[str, float]:
    groups: dict[str, list[float]] = {}
    for key, value in zip(keys, values):
        groups.setdefault(key, []).append(float(value))
    return {key: float(np.mean(groups[key])) for key in sorted(groups)}


def knn_purity(records: Sequence[EmbeddingRecord], k: int) -> PurityReport:
    if len(records) <= k:
        raise TooFewRecords(len(records), k)
    vectors = np.stack([r.vector for r in records])
    labels = np.array([r.label for r in records], dtype=object)
    neighbors = nearest_neighbors(vectors, k)
    per_record = (labels[neighbors] == labels[:, None]).mean(axis=1).astype(np.float64)
    return PurityReport(
        k=k,
        overall=float(per_record.mean()),
        per_grapheme=_group_means([r.grapheme for r in records], per_record),
        per_phoneme=_group_means([r.label for r in records], per_record),
        per_record=per_record,
    )


def one_hot_records(records: Sequence[EmbeddingRecord], vocab: GraphemeVocab) -> list[EmbeddingRecord]:
    """Same records with one-hot grapheme vectors: the no-context baseline."""
    out = []
    for r in records:
        vector = np.zeros(len(vocab))
        vector[vocab.index[r.grapheme]] = 1.0
        out.append(EmbeddingRecord(vector, r.utterance_id, r.position, r.grapheme, r.label))
    return out


def punctuation_similarity(records: Sequence[EmbeddingRecord]) -> tuple[float, float]:
    """Mean cosine among punctuation embeddings, and between punctuation and letters."""
    punct = [r.vector for r in records if r.grapheme in PUNCTUATION]
    letters = [r.vector for r in records if r.grapheme in LETTERS]
    if len(punct) < 2 or not letters:
        raise TooFewRecords(len(punct), 2)
    p = np.stack(punct)
    p = p / np.maximum(np.linalg.norm(p, axis=1, keepdims=True), MACHINE_EPSILON)
    l = np.stack(letters)
    l = l / np.maximum(np.linalg.norm(l, axis=1, keepdims=True), MACHINE_EPSILON)
    within = p @ p.T
    count = p.shape[0]
    within_mean = (within.sum() - np.trace(within)) / (count * (count - 1))
    return float(within_mean), float((p @ l.T).mean())


def subsample_records(records: Sequence[EmbeddingRecord], max_points: int,
                      seed: int) -> list[EmbeddingRecord]:
    if len(records) <= max_points:
        return list(records)
    keep = sorted(Prng(seed).sample(len(records), max_points))
    return [records[i] for i in keep]


def highlight_groups(records: Sequence[EmbeddingRecord]) -> dict[str, list[int]]:
    return {
        "all": list(range(len(records))),
        "n": [i for i, r in enumerate(records) if r.grapheme == "n"],
        "u": [i for i, r in enumerate(records) if r.grapheme == "u"],
        "punctuation": [i for i, r in enumerate(records) if r.grapheme in PUNCTUATION],
    }


# ============================================================================
# Embedding swap
# ============================================================================

@dataclass(frozen=True)
class SwapOutcome:
    host_id: str
    host_position: int
    donor_id: str
    donor_position: int
    host_label: str
    donor_label: str
    original: tuple[str, ...]
    swapped: tuple[str, ...]
    original_site: str | None
    swapped_site: str | None
    prediction_distance: int

    @property
    def carried_donor(self) -> bool:
        return self.swapped_site == self.donor_label


def _site_phoneme(utterance: Utterance, position: int, prediction: Sequence[str]) -> str | None:
    alignment = utterance.alignment or tuple(phonetize_toy(utterance.graphemes)[1])
    start, stop = alignment[position]
    if stop == start:
        return None
    hyp_index = levenshtein_align(utterance.phonemes, prediction).hypothesis_at(start)
    return None if hyp_index is None else prediction[hyp_index]


def swap_and_probe(encoder: EncoderModel, probe: ProbeModel, graphemes: GraphemeVocab,
                   phonemes: PhonemeVocab, host: Utterance, position: int, donor: Utterance,
                   donor_position: int, host_vectors: np.ndarray | None = None,
                   donor_vectors: np.ndarray | None = None) -> SwapOutcome:
    """Replace host[position]'s embedding by donor[donor_position]'s and re-run the probe."""
    if probe.mode != ProbeMode.EMBEDDING:
        raise WrongProbeMode("embedding swap needs an embedding-mode probe")
    if not 0 <= position < len(host.graphemes):
        raise PositionOutOfRange(position, len(host.graphemes))
    if not 0 <= donor_position < len(donor.graphemes):
        raise PositionOutOfRange(donor_position, len(donor.graphemes))
    if host_vectors is None:
        host_vectors = encode(encoder, graphemes.encode(host.graphemes)).data
    if donor_vectors is None:
        donor_vectors = encode(encoder, graphemes.encode(donor.graphemes)).data

    modified = host_vectors.copy()
    modified[position] = donor_vectors[donor_position]
    original = tuple(phonemes.decode(probe_predict(probe, host_vectors)))
    swapped = tuple(phonemes.decode(probe_predict(probe, modified)))
    return SwapOutcome(
        host_id=host.id,
        host_position=position,
        donor_id=donor.id,
        donor_position=donor_position,
        host_label=host.labels()[position],
        donor_label=donor.labels()[donor_position],
        original=original,
        swapped=swapped,
        original_site=_site_phoneme(host, position, original),
        swapped_site=_site_phoneme(host, position, swapped),
        prediction_distance=levenshtein_align(original, swapped).distance,
    )


def _neighbor_class(tokens: Sequence[str], i: int) -> str:
    if not 0 <= i < len(tokens):
        return "edge"
    token = tokens[i]
    if token == SPACE:
        return "space"
    if token in PUNCTUATION:
        return "punct"
    return "vowel" if token in VOWELS else "consonant"


@dataclass(frozen=True)
class _Site:
    utterance: int
    position: int
    label: str
    context: tuple[int, str, str]


def swap_sites(utterances: Sequence[Utterance]) -> list[_Site]:
    """Pronounced grapheme positions keyed by (rule fired, left class, right class)."""
    sites = []
    for u_index, utterance in enumerate(utterances):
        _, _, rules = phonetize_trace(utterance.graphemes)
        labels = utterance.labels()
        for position, label in enumerate(labels):
            if label == SILENT:
                continue
            context = (rules[position], _neighbor_class(utterance.graphemes, position - 1),
                       _neighbor_class(utterance.graphemes, position + 1))
            sites.append(_Site(u_index, position, label, context))
    return sites


@dataclass(frozen=True)
class SwapReport:
    matched: bool
    rate: float
    outcomes: tuple[SwapOutcome, ...]


def swap_experiment(encoder: EncoderModel, probe: ProbeModel, corpus: Corpus, split: str,
                    graphemes: GraphemeVocab, phonemes: PhonemeVocab, pairs: int, matched: bool,
                    seed: int) -> SwapReport:
    """Sample donor/host pairs and report how often the swap site reads the donor phoneme.

    Matched pairs share the phonetizer rule and neighbor classes at the site and
    carry different phonemes; mismatched pairs differ in rule context.
    """
    utterances = corpus.split(split)
    sites = swap_sites(utterances)
    if not sites:
        raise InsufficientData(f"split '{split}' has no pronounced graphemes")
    by_context: dict[tuple[int, str, str], list[_Site]] = {}
    for site in sites:
        by_context.setdefault(site.context, []).append(site)

    prng = Prng(seed)
    vectors: dict[int, np.ndarray] = {}

    def embeddings(index: int) -> np.ndarray:
        if index not in vectors:
            vectors[index] = encode(encoder, graphemes.encode(utterances[index].graphemes)).data
        return vectors[index]

    outcomes = []
    for _ in range(pairs * 50):
        if len(outcomes) >= pairs:
            break
        host = sites[prng.below(len(sites))]
        pool = by_context[host.context] if matched else sites
        candidates = [
            s for s in pool
            if s.utterance != host.utterance and s.label != host.label
            and (s.context == host.context) == matched
        ]
        if not candidates:
            continue
        donor = candidates[prng.below(len(candidates))]
        outcomes.append(swap_and_probe(
            encoder, probe, graphemes, phonemes,
            utterances[host.utterance], host.position,
            utterances[donor.utterance], donor.position,
            embeddings(host.utterance), embeddings(donor.utterance),
        ))
    if not outcomes:
        raise InsufficientData(f"no {'matched' if matched else 'mismatched'} swap pairs in '{split}'")
    rate = sum(o.carried_donor for o in outcomes) / len(outcomes)
    logging.info(f"[graphemelab] swap matched={matched} pairs={len(outcomes)} donor_rate={rate:.3f}")
    return SwapReport(matched, rate, tuple(outcomes))


# ============================================================================
# Tabular export
# ============================================================================

TABLE_KEYS = ("utterance_id", "position", "grapheme", "label")


def _format_float(value: float) -> str:
    return format(float(value), ".17g")


def export_table(records: Sequence[EmbeddingRecord], path: Path, values: np.ndarray | None = None,
                 value_names: Sequence[str] | None = None,
                 groups: Sequence[str] | None = None) -> None:
    """One row per record; the vector columns default to the record embeddings."""
    if values is None:
        values = np.stack([r.vector for r in records]) if records else np.zeros((0, 0))
    if value_names is None:
        value_names = [f"d{i}" for i in range(values.shape[1])]
    header = list(TABLE_KEYS) + (["group"] if groups is not None else []) + list(value_names)
    lines = ["\t".join(header)]
    for index, record in enumerate(records):
        fields = [record.utterance_id, str(record.position), record.grapheme, record.label]
        if groups is not None:
            fields.append(groups[index])
        fields.extend(_format_float(v) for v in values[index])
        lines.append("\t".join(fields))
    write_text_atomic(path, "\n".join(lines) + "\n")


def read_table(path: Path) -> tuple[list[EmbeddingRecord], list[str]]:
    """Inverse of export_table: records (vectors from the value columns) and value names."""
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    lines = text.split("\n")
    header = lines[0].split("\t")
    if tuple(header[:4]) != TABLE_KEYS:
        raise IoFailure(f"{path}: unexpected header {header[:4]}")
    offset = 5 if len(header) > 4 and header[4] == "group" else 4
    records = []
    for line in lines[1:]:
        if not line:
            continue
        fields = line.split("\t")
        vector = np.array([float(v) for v in fields[offset:]])
        records.append(EmbeddingRecord(vector, fields[0], int(fields[1]), fields[2], fields[3]))
    return records, header[offset:]
