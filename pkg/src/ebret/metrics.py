"""Retrieval and generation metrics.

Retrieval: joint accuracy (exact subset match per turn), inform (every gold
piece retrieved at its turn, per session), micro-averaged precision/recall/F1
over piece decisions. Generation: corpus BLEU-4 with add-one smoothing on
zero higher-order counts, session success (every requested value string
produced), and the combined score success + 2*bleu in percentage points.
"""

from __future__ import annotations

import math
from collections import Counter
from typing import Iterable, Sequence

from .corpus import SubsetMask
from .errors import DataError, DimensionError


def _check_aligned(pred: Sequence[SubsetMask], gold: Sequence[SubsetMask]) -> None:
    if len(pred) != len(gold):
        raise DimensionError(
            f"{len(pred)} predictions vs {len(gold)} references"
        )
    for p, g in zip(pred, gold):
        if p.width != g.width:
            raise DimensionError("prediction/reference mask widths differ")


def joint_acc(pred: Sequence[SubsetMask], gold: Sequence[SubsetMask]) -> float:
    """Fraction of turns whose predicted subset equals the gold subset."""
    _check_aligned(pred, gold)
    if not pred:
        return 0.0
    return sum(p == g for p, g in zip(pred, gold)) / len(pred)


def inform(pred: Sequence[SubsetMask], gold: Sequence[SubsetMask],
           turns_per_session: Sequence[int]) -> float:
    """Fraction of sessions where every turn's gold pieces were all retrieved.

    A session scores 1 iff gold is a subset of the prediction at every turn.
    """
    _check_aligned(pred, gold)
    if sum(turns_per_session) != len(pred):
        raise DimensionError("session sizes do not add up to the turn count")
    if not turns_per_session:
        return 0.0
    ok = 0
    pos = 0
    for n in turns_per_session:
        ok += all(
            pred[pos + t].covers(gold[pos + t]) for t in range(n)
        )
        pos += n
    return ok / len(turns_per_session)


def prf1(pred: Sequence[SubsetMask], gold: Sequence[SubsetMask]) -> tuple[float, float, float]:
    """Micro-averaged precision/recall/F1 over all (turn, piece) decisions."""
    _check_aligned(pred, gold)
    tp = fp = fn = 0
    for p, g in zip(pred, gold):
        tp += (p.bits & g.bits).bit_count()
        fp += (p.bits & ~g.bits).bit_count()
        fn += (~p.bits & g.bits).bit_count()
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def _ngrams(words: Sequence, n: int) -> Iterable[tuple]:
    return (tuple(words[i : i + n]) for i in range(len(words) - n + 1))


def bleu4(hypotheses: Sequence[Sequence], references: Sequence[Sequence]) -> float:
    """Corpus-level BLEU with uniform 1/4 weights over n = 1..4.

    Modified n-gram precision with clipping against the aligned reference,
    standard brevity penalty, and add-one smoothing whenever a higher-order
    (n >= 2) clipped count is zero. Order-n precision is neutral (1) when the
    corpus has no n-grams of that order at all.
    """
    if len(hypotheses) == 0:
        raise DataError("empty corpus")
    if len(hypotheses) != len(references):
        raise DimensionError("hypothesis/reference counts differ")
    hyp_len = sum(len(h) for h in hypotheses)
    ref_len = sum(len(r) for r in references)
    if hyp_len == 0:
        return 0.0
    log_sum = 0.0
    for n in range(1, 5):
        matched = 0
        total = 0
        for hyp, ref in zip(hypotheses, references):
            counts = Counter(_ngrams(hyp, n))
            ref_counts = Counter(_ngrams(ref, n))
            total += sum(counts.values())
            matched += sum(min(c, ref_counts[g]) for g, c in counts.items())
        if total == 0:
            continue
        if matched == 0:
            if n == 1:
                return 0.0
            matched, total = 1, total + 1
        log_sum += 0.25 * math.log(matched / total)
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return bp * math.exp(log_sum)


def success(generated: Sequence[Sequence[Sequence]],
            requested: Sequence[Iterable[str]]) -> float:
    """Fraction of sessions whose generations contain every requested value.

    `generated[s]` are session s's generated responses as word lists;
    sessions with nothing requested are excluded from the mean.
    """
    if len(generated) != len(requested):
        raise DimensionError("generated/requested session counts differ")
    scored = 0
    ok = 0
    for responses, wanted in zip(generated, requested):
        wanted = set(wanted)
        if not wanted:
            continue
        scored += 1
        produced = {w for r in responses for w in r}
        ok += wanted <= produced
    return ok / scored if scored else 0.0


def combined(success_pct: float, bleu_pct: float) -> float:
    """Overall dialog score: success + 2 * bleu, both in percentage points."""
    return success_pct + 2.0 * bleu_pct
