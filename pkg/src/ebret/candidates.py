"""Top-K subset enumeration under a factored Bernoulli distribution.

The beam enumerator walks the pieces as lattice steps (select / not select)
keeping the K best prefixes; because per-step factors are independent this
provably returns the exhaustive top K. The exhaustive enumerator is the test
oracle. Both use the same total order: probability descending, then
lexicographically smaller mask (bit 0 first), and both accumulate
log-probabilities in piece order so ties agree bit-for-bit.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass

import numpy as np

from .corpus import SubsetMask
from .errors import ConfigError, ScaleError
from .proposal import clamp_probs, masks_logprob

EXHAUSTIVE_MAX_N = 16


@dataclass(frozen=True)
class Candidate:
    """A proposed subset with its proposal log-probability and, once
    rescored, its unnormalized energy-model log-score."""

    mask: SubsetMask
    proposal_logprob: float
    energy_score: float | None = None


def top_k_subsets(probs: np.ndarray, k: int) -> list[Candidate]:
    """Beam-width-K enumeration of the K most probable subsets.

    Returns exactly min(k, 2^N) candidates in descending probability,
    ties broken by lexicographically smaller mask.
    """
    if k < 1:
        raise ConfigError("k must be >= 1")
    probs = clamp_probs(np.asarray(probs, dtype=float))
    n = len(probs)
    lp1 = np.log(probs)
    lp0 = np.log1p(-probs)
    # beam entries: (logprob, lex prefix key, mask bits)
    beam = [(0.0, 0, 0)]
    for i in range(n):
        expanded = []
        for logp, key, bits in beam:
            expanded.append((logp + lp0[i], key << 1, bits))
            expanded.append((logp + lp1[i], (key << 1) | 1, bits | (1 << i)))
        beam = heapq.nsmallest(k, expanded, key=lambda e: (-e[0], e[1]))
    return [Candidate(SubsetMask(bits, n), logp) for logp, _, bits in beam]


def exhaustive_top_k(probs: np.ndarray, k: int) -> list[Candidate]:
    """Sort all 2^N subsets by the same total order; oracle for the beam."""
    if k < 1:
        raise ConfigError("k must be >= 1")
    probs = np.asarray(probs, dtype=float)
    n = len(probs)
    if n > EXHAUSTIVE_MAX_N:
        raise ScaleError(f"exhaustive enumeration capped at N={EXHAUSTIVE_MAX_N}")
    m = 1 << n
    bits = np.arange(m, dtype=np.int64)
    bit_matrix = (bits[:, None] >> np.arange(n)) & 1
    logps = masks_logprob(bit_matrix, probs)
    # lexicographic key: bit 0 is the most significant position
    lex = np.zeros(m, dtype=np.int64)
    for i in range(n):
        lex = (lex << 1) | ((bits >> i) & 1)
    order = np.lexsort((lex, -logps))[: min(k, m)]
    return [
        Candidate(SubsetMask(int(bits[i]), n), float(logps[i])) for i in order
    ]
