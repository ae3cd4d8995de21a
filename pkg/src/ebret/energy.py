"""Energy scorer over whole retrieval subsets.

A subset is serialized as the selected pieces in KB index order joined by
SEP, appended to the dialog state:

    x = context SEP user SEP piece_a SEP piece_b ...

and scored U = -(w2 . tanh(W1 @ sum emb(x) + b1) + b2). Lower energy means
higher unnormalized probability. Two normalization conventions:

    nonresidual:  log p~(mask) = -U(mask)
    residual:     log p~(mask) = log p_ref(mask) - U(mask)

with the reference p_ref a frozen factored relevance model. The exact
partition function is computed only as a small-N oracle; nothing at
inference time ever needs it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .corpus import SEP, SubsetMask
from .encoder import (
    PooledParams,
    TokenBatch,
    batch_scores,
    score_tokens,
)
from .errors import ModeError, ScaleError
from .proposal import ProposalParams, masks_logprob, piece_probs

EnergyParams = PooledParams

ENUM_MAX_N = 16

NONRESIDUAL = "nonresidual"
RESIDUAL = "residual"


@dataclass(frozen=True)
class EnergyMode:
    """Normalization convention plus, for residual form, the frozen reference."""

    kind: str
    reference: ProposalParams | None = None

    def __post_init__(self) -> None:
        if self.kind not in (NONRESIDUAL, RESIDUAL):
            raise ModeError(f"unknown energy mode {self.kind!r}")
        if self.kind == RESIDUAL and self.reference is None:
            raise ModeError("residual mode requires a reference model")

    @classmethod
    def nonresidual(cls) -> "EnergyMode":
        return cls(NONRESIDUAL)

    @classmethod
    def residual(cls, reference: ProposalParams) -> "EnergyMode":
        return cls(RESIDUAL, reference)


def serialize_subset(
    mask: SubsetMask, piece_tokens: Sequence[Sequence[int]]
) -> list[int]:
    """Selected pieces in KB index order with a single SEP between pieces."""
    parts = [list(piece_tokens[i]) for i in mask.indices()]
    out: list[int] = []
    for i, part in enumerate(parts):
        if i:
            out.append(SEP)
        out.extend(part)
    return out


def subset_input(context: Sequence[int], user: Sequence[int], mask: SubsetMask,
                 piece_tokens: Sequence[Sequence[int]]) -> list[int]:
    return (
        list(context) + [SEP] + list(user) + [SEP]
        + serialize_subset(mask, piece_tokens)
    )


def energy(context: Sequence[int], user: Sequence[int], mask: SubsetMask,
           piece_tokens: Sequence[Sequence[int]], params: EnergyParams) -> float:
    """Scalar energy U of one (context, user, subset) triple."""
    if mask.width != len(piece_tokens):
        raise ModeError("mask width does not match KB size")
    return -score_tokens(params, subset_input(context, user, mask, piece_tokens))


def _ref_probs(context, user, piece_tokens, mode: EnergyMode,
               ref_probs: np.ndarray | None) -> np.ndarray:
    if ref_probs is not None:
        return np.asarray(ref_probs, dtype=float)
    if mode.reference is None:
        raise ModeError("residual mode requires reference piece probabilities")
    if len(piece_tokens) == 0:
        raise ModeError("residual mode requires the KB (no pieces available)")
    return piece_probs(context, user, piece_tokens, mode.reference)


def unnorm_logp(context: Sequence[int], user: Sequence[int], mask: SubsetMask,
                piece_tokens: Sequence[Sequence[int]], params: EnergyParams,
                mode: EnergyMode, ref_probs: np.ndarray | None = None) -> float:
    """Unnormalized log-probability of one subset under the chosen mode.

    For residual mode the reference's piece probabilities can be passed in to
    avoid rescoring the KB; they must then match mode.reference's output.
    """
    u = energy(context, user, mask, piece_tokens, params)
    if mode.kind == NONRESIDUAL:
        return -u
    from .proposal import subset_logprob

    probs = _ref_probs(context, user, piece_tokens, mode, ref_probs)
    return subset_logprob(mask, probs) - u


# ---------------------------------------------------------------------------
# Batched subset scoring (shared with the trainer and the rescorer)


@dataclass
class SubsetDesign:
    """Pooled token counts for arbitrary subsets of one turn's KB."""

    uniq: np.ndarray   # (U,) token ids
    base: np.ndarray   # (U,) counts of context SEP user SEP
    piece: np.ndarray  # (N, U) counts per piece serialization
    sep_col: int       # column of SEP inside uniq


def subset_design(context: Sequence[int], user: Sequence[int],
                  piece_tokens: Sequence[Sequence[int]]) -> SubsetDesign:
    base_tokens = list(context) + [SEP] + list(user) + [SEP]
    vocab_ids = set(base_tokens) | {SEP}
    for p in piece_tokens:
        vocab_ids.update(p)
    uniq = np.array(sorted(vocab_ids), dtype=np.intp)
    pos = {int(t): i for i, t in enumerate(uniq)}
    base = np.zeros(len(uniq))
    for t in base_tokens:
        base[pos[t]] += 1.0
    piece = np.zeros((len(piece_tokens), len(uniq)))
    for i, p in enumerate(piece_tokens):
        for t in p:
            piece[i, pos[int(t)]] += 1.0
    return SubsetDesign(uniq, base, piece, pos[SEP])


def design_batch(design: SubsetDesign, bit_matrix: np.ndarray) -> TokenBatch:
    """Token counts for each subset row of a 0/1 bit matrix (M, N)."""
    counts = design.base[None, :] + bit_matrix.astype(float) @ design.piece
    joins = np.maximum(bit_matrix.sum(axis=1) - 1, 0).astype(float)
    counts[:, design.sep_col] += joins
    return TokenBatch(design.uniq, counts)


def enumerate_scores(context: Sequence[int], user: Sequence[int],
                     piece_tokens: Sequence[Sequence[int]],
                     params: EnergyParams) -> np.ndarray:
    """Scorer output s = -U for every subset, indexed by mask bits."""
    n = len(piece_tokens)
    if n > ENUM_MAX_N:
        raise ScaleError(f"exact enumeration capped at N={ENUM_MAX_N}")
    bits = np.arange(1 << n, dtype=np.int64)
    bit_matrix = (bits[:, None] >> np.arange(n)) & 1 if n else np.zeros((1, 0), dtype=np.int64)
    batch = design_batch(subset_design(context, user, piece_tokens), bit_matrix)
    s, _ = batch_scores(params, batch)
    return s


def enumerate_unnorm_logps(context: Sequence[int], user: Sequence[int],
                           piece_tokens: Sequence[Sequence[int]],
                           params: EnergyParams, mode: EnergyMode,
                           ref_probs: np.ndarray | None = None) -> np.ndarray:
    """Unnormalized log-probability of every subset, indexed by mask bits."""
    s = enumerate_scores(context, user, piece_tokens, params)
    if mode.kind == NONRESIDUAL:
        return s
    n = len(piece_tokens)
    probs = _ref_probs(context, user, piece_tokens, mode, ref_probs)
    bits = np.arange(1 << n, dtype=np.int64)
    bit_matrix = (bits[:, None] >> np.arange(n)) & 1
    return masks_logprob(bit_matrix, probs) + s


def exact_log_partition(context: Sequence[int], user: Sequence[int],
                        piece_tokens: Sequence[Sequence[int]],
                        params: EnergyParams, mode: EnergyMode,
                        ref_probs: np.ndarray | None = None) -> float:
    """log Z by log-sum-exp over all 2^N subsets. Small-N oracle only."""
    lps = enumerate_unnorm_logps(context, user, piece_tokens, params, mode, ref_probs)
    m = float(lps.max())
    return m + float(np.log(np.exp(lps - m).sum()))


def exact_prob(mask: SubsetMask, context: Sequence[int], user: Sequence[int],
               piece_tokens: Sequence[Sequence[int]], params: EnergyParams,
               mode: EnergyMode, ref_probs: np.ndarray | None = None) -> float:
    """Fully normalized subset probability. Small-N oracle only."""
    lps = enumerate_unnorm_logps(context, user, piece_tokens, params, mode, ref_probs)
    m = float(lps.max())
    z = float(np.exp(lps - m).sum())
    return float(np.exp(lps[mask.bits] - m)) / z
