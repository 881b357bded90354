"""
Metrics: Levenshtein alignment and Phoneme Error Rate.

PER = (substitutions + deletions + insertions) / len(reference), counted on a
unit-cost alignment. The backtrace prefers match > substitution > deletion >
insertion, so the S/D/I split is deterministic even when several optimal edit
scripts exist.
"""

import logging
from dataclasses import dataclass
from typing import Hashable, Iterable, Sequence

import numpy as np

from graphemelab.errors import EmptyReference
from graphemelab.numerics import Prng


@dataclass(frozen=True)
class EditOp:
    kind: str  # "match", "sub", "del" or "ins"
    ref_index: int | None
    hyp_index: int | None


@dataclass(frozen=True)
class EditSummary:
    distance: int
    substitutions: int
    deletions: int
    insertions: int
    operations: tuple[EditOp, ...] = ()

    def hypothesis_at(self, ref_index: int) -> int | None:
        """Hypothesis position aligned to a reference position (None if deleted)."""
        for op in self.operations:
            if op.ref_index == ref_index:
                return op.hyp_index
        return None


def levenshtein_align(reference: Sequence[Hashable], hypothesis: Sequence[Hashable]) -> EditSummary:
    n, m = len(reference), len(hypothesis)
    table = np.zeros((n + 1, m + 1), dtype=np.int64)
    table[:, 0] = np.arange(n + 1)
    table[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            cost = 0 if reference[i - 1] == hypothesis[j - 1] else 1
            table[i, j] = min(table[i - 1, j - 1] + cost, table[i - 1, j] + 1, table[i, j - 1] + 1)

    operations: list[EditOp] = []
    counts = {"sub": 0, "del": 0, "ins": 0}
    i, j = n, m
    while i > 0 or j > 0:
        here = table[i, j]
        if i > 0 and j > 0 and reference[i - 1] == hypothesis[j - 1] and here == table[i - 1, j - 1]:
            operations.append(EditOp("match", i - 1, j - 1))
            i, j = i - 1, j - 1
        elif i > 0 and j > 0 and here == table[i - 1, j - 1] + 1:
            operations.append(EditOp("sub", i - 1, j - 1))
            counts["sub"] += 1
            i, j = i - 1, j - 1
        elif i > 0 and here == table[i - 1, j] + 1:
            operations.append(EditOp("del", i - 1, None))
            counts["del"] += 1
            i -= 1
        else:
            operations.append(EditOp("ins", None, j - 1))
            counts["ins"] += 1
            j -= 1
    operations.reverse()
    return EditSummary(int(table[n, m]), counts["sub"], counts["del"], counts["ins"], tuple(operations))


def per(reference: Sequence[Hashable], hypothesis: Sequence[Hashable]) -> float:
    if not reference:
        raise EmptyReference()
    return levenshtein_align(reference, hypothesis).distance / len(reference)


@dataclass(frozen=True)
class CorpusPer:
    micro: float
    macro: float
    utterances: int
    empty: bool = False


def corpus_per(pairs: Iterable[tuple[str, Sequence[Hashable], Sequence[Hashable]]]) -> CorpusPer:
    """Micro (pooled) and macro (per-utterance mean) PER over (id, ref, hyp) triples."""
    edits = 0
    reference_total = 0
    rates = []
    for utterance_id, reference, hypothesis in pairs:
        if not reference:
            raise EmptyReference(utterance_id)
        distance = levenshtein_align(reference, hypothesis).distance
        edits += distance
        reference_total += len(reference)
        rates.append(distance / len(reference))
    if not rates:
        logging.warning("corpus_per called with no utterances")
        return CorpusPer(0.0, 0.0, 0, empty=True)
    return CorpusPer(edits / reference_total, sum(rates) / len(rates), len(rates))


def paired_permutation_test(a: Sequence[float], b: Sequence[float], rounds: int = 10000,
                            seed: int = 0) -> float:
    """Two-sided sign-flip permutation p-value for mean(a - b) == 0."""
    diffs = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    if diffs.size == 0:
        return 1.0
    observed = abs(diffs.mean())
    signs = np.where(Prng(seed).uniform_array((rounds, diffs.size)) < 0.5, -1.0, 1.0)
    permuted = np.abs((signs * diffs).mean(axis=1))
    extreme = int((permuted >= observed - 1e-12).sum())
    return (extreme + 1) / (rounds + 1)
