"""Retrieval by propose-then-rescore.

The factored relevance model proposes its top-K subsets; the energy model
scores each; the best unnormalized log-score wins. Ties fall back to the
proposal log-probability, then to the lexicographically smaller mask. The
exact argmax over all subsets is provided as a small-N oracle.
"""

from __future__ import annotations

from dataclasses import replace
from typing import Sequence

import numpy as np

from .candidates import Candidate, top_k_subsets
from .corpus import SubsetMask
from .encoder import batch_scores
from .energy import (
    EnergyMode,
    EnergyParams,
    NONRESIDUAL,
    design_batch,
    enumerate_unnorm_logps,
    subset_design,
)
from .errors import ConfigError
from .proposal import ProposalParams, masks_logprob, piece_probs

DEFAULT_K = 16


def rescore_retrieve(
    context: Sequence[int], user: Sequence[int],
    piece_tokens: Sequence[Sequence[int]],
    proposal_params: ProposalParams, energy_params: EnergyParams,
    mode: EnergyMode, k: int = DEFAULT_K,
) -> tuple[SubsetMask, list[Candidate]]:
    """Top-K proposal then energy rescoring; returns (winner, ranked list)."""
    if k < 1:
        raise ConfigError("k must be >= 1")
    probs = piece_probs(context, user, piece_tokens, proposal_params)
    cands = top_k_subsets(probs, k)
    bit_matrix = np.array(
        [[c.mask.bit(i) for i in range(c.mask.width)] for c in cands],
        dtype=np.int64,
    )
    batch = design_batch(subset_design(context, user, piece_tokens), bit_matrix)
    s, _ = batch_scores(energy_params, batch)
    if mode.kind == NONRESIDUAL:
        scores = s
    else:
        ref = (probs if mode.reference is proposal_params
               else piece_probs(context, user, piece_tokens, mode.reference))
        scores = s + masks_logprob(bit_matrix, ref)
    scored = [replace(c, energy_score=float(scores[i])) for i, c in enumerate(cands)]
    ranked = sorted(
        scored,
        key=lambda c: (-c.energy_score, -c.proposal_logprob, c.mask.lex_key()),
    )
    return ranked[0].mask, ranked


def oracle_retrieve(
    context: Sequence[int], user: Sequence[int],
    piece_tokens: Sequence[Sequence[int]],
    energy_params: EnergyParams, mode: EnergyMode,
) -> SubsetMask:
    """Exact argmax of the unnormalized log-probability over all 2^N subsets."""
    lps = enumerate_unnorm_logps(context, user, piece_tokens, energy_params, mode)
    n = len(piece_tokens)
    bits = np.arange(1 << n, dtype=np.int64)
    lex = np.zeros(1 << n, dtype=np.int64)
    for i in range(n):
        lex = (lex << 1) | ((bits >> i) & 1)
    best = int(np.lexsort((lex, -lps))[0])
    return SubsetMask(best, n)
