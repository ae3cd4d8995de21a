"""Per-piece relevance model: independent Bernoulli probabilities given context.

This factored model plays three roles: thresholding decoder baseline,
sampling proposal for the Monte Carlo energy trainers, and reference
distribution for residual energies. One shared scorer produces a relevance
logit per (context, user, piece) triple from the pooled input

    context SEP user SEP piece_text
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .corpus import SEP, SubsetMask, TurnView
from .encoder import (
    PooledParams,
    TokenBatch,
    batch_from_token_lists,
    batch_scores,
    batch_weighted_grad,
    init_pooled,
)
from .errors import ConfigError, DataError, DimensionError

ProposalParams = PooledParams

# Piece probabilities are clamped into [PROB_FLOOR, 1 - PROB_FLOOR] so that
# no log ever sees a value below the floor.
PROB_FLOOR = 1e-6


def clamp_probs(probs: np.ndarray) -> np.ndarray:
    return np.clip(probs, PROB_FLOOR, 1.0 - PROB_FLOOR)


def _sigmoid(s):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(s, dtype=float)))


def piece_input(context: Sequence[int], user: Sequence[int],
                piece_tokens: Sequence[int]) -> list[int]:
    return list(context) + [SEP] + list(user) + [SEP] + list(piece_tokens)


def piece_prob(context: Sequence[int], user: Sequence[int],
               piece_tokens: Sequence[int], params: ProposalParams) -> float:
    """Clamped relevance probability of one piece given the dialog state."""
    from .encoder import score_tokens

    s = score_tokens(params, piece_input(context, user, piece_tokens))
    return float(clamp_probs(np.array([_sigmoid(s)]))[0])


def piece_probs(context: Sequence[int], user: Sequence[int],
                piece_token_lists: Sequence[Sequence[int]],
                params: ProposalParams) -> np.ndarray:
    """Vector of clamped relevance probabilities, one per KB piece."""
    if len(piece_token_lists) == 0:
        return np.zeros(0)
    batch = batch_from_token_lists(
        [piece_input(context, user, p) for p in piece_token_lists]
    )
    s, _ = batch_scores(params, batch)
    return clamp_probs(_sigmoid(s))


def subset_logprob(mask: SubsetMask, probs: np.ndarray) -> float:
    """log prod_i p_i^{m_i} (1-p_i)^{1-m_i}, accumulated in piece order.

    The sequential accumulation order matters: the beam enumerator and the
    exhaustive oracle produce bit-identical values so ties agree exactly.
    """
    probs = np.asarray(probs, dtype=float)
    if mask.width != probs.shape[0]:
        raise DimensionError(
            f"mask width {mask.width} != probability vector length {probs.shape[0]}"
        )
    p = clamp_probs(probs)
    lp1 = np.log(p)
    lp0 = np.log1p(-p)
    acc = 0.0
    for i in range(mask.width):
        acc += lp1[i] if (mask.bits >> i) & 1 else lp0[i]
    return acc


def masks_logprob(bit_matrix: np.ndarray, probs: np.ndarray) -> np.ndarray:
    """Vectorized subset_logprob for many masks (rows of a 0/1 matrix).

    Accumulates per piece in the same order as subset_logprob, so results
    are bit-identical with the scalar path.
    """
    probs = np.asarray(probs, dtype=float)
    if bit_matrix.shape[1] != probs.shape[0]:
        raise DimensionError("bit matrix columns != probability vector length")
    p = clamp_probs(probs)
    lp1 = np.log(p)
    lp0 = np.log1p(-p)
    acc = np.zeros(bit_matrix.shape[0])
    for i in range(probs.shape[0]):
        acc += np.where(bit_matrix[:, i] > 0, lp1[i], lp0[i])
    return acc


def threshold_decode(probs: np.ndarray, tau: float = 0.5) -> SubsetMask:
    """Select every piece with probability strictly above tau."""
    if not 0.0 <= tau <= 1.0:
        raise ConfigError("tau must lie in [0, 1]")
    probs = clamp_probs(np.asarray(probs, dtype=float))
    bits = 0
    for i, p in enumerate(probs):
        if p > tau:
            bits |= 1 << i
    return SubsetMask(bits, len(probs))


def sample_subset(probs: np.ndarray, rng: np.random.Generator) -> SubsetMask:
    """Draw each bit independently Bernoulli(p_i)."""
    probs = clamp_probs(np.asarray(probs, dtype=float))
    draws = rng.random(len(probs)) < probs
    bits = 0
    for i, b in enumerate(draws):
        if b:
            bits |= 1 << i
    return SubsetMask(bits, len(probs))


# ---------------------------------------------------------------------------
# Supervised training


@dataclass(frozen=True)
class SGDConfig:
    """Plain SGD settings shared by the supervised trainers.

    The step size decays as lr / (1 + lr_decay * epoch); no momentum, no
    adaptive moments.
    """

    lr: float = 0.3
    lr_decay: float = 0.02
    epochs: int = 300
    batch: int = 16
    seed: int = 0
    d_emb: int = 32
    hidden: int = 32

    def step_size(self, epoch: int) -> float:
        return self.lr / (1.0 + self.lr_decay * epoch)


def bce_loss_and_grad(
    params: PooledParams, batch: TokenBatch, targets: np.ndarray
) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy (nats/row) and its flat gradient."""
    s, cache = batch_scores(params, batch)
    # log(1 + e^s) - y*s, evaluated stably
    loss = float(np.mean(np.logaddexp(0.0, s) - targets * s))
    coeff = (_sigmoid(s) - targets) / batch.n_rows
    return loss, batch_weighted_grad(params, batch, cache, coeff)


def _piece_rows(views: Sequence[TurnView]) -> tuple[list[list[int]], np.ndarray]:
    rows, targets = [], []
    for view in views:
        if view.gold is None:
            raise DataError(
                f"unlabeled turn {view.session_id}/{view.turn_index} in training data"
            )
        for i, piece in enumerate(view.piece_tokens):
            rows.append(piece_input(view.context, view.user, piece))
            targets.append(float(view.gold.bit(i)))
    return rows, np.array(targets)


def train_proposal(
    views: Sequence[TurnView], vocab_size: int, config: SGDConfig,
    log_path: str | None = None,
) -> ProposalParams:
    """Minimize per-piece binary cross-entropy with plain SGD.

    Deterministic given config.seed. The training log (one JSON object per
    epoch) is written to log_path when given.
    """
    rows, targets = _piece_rows(views)
    batch = batch_from_token_lists(rows)
    rng = np.random.default_rng(config.seed)
    params = init_pooled(vocab_size, config.d_emb, config.hidden, rng)
    vec = params.flatten()
    log_f = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for epoch in range(config.epochs):
            t0 = time.monotonic()
            lr = config.step_size(epoch)
            perm = rng.permutation(batch.n_rows)
            losses = []
            for start in range(0, batch.n_rows, config.batch):
                idx = perm[start : start + config.batch]
                loss, grad = bce_loss_and_grad(params, batch.rows(idx), targets[idx])
                losses.append(loss)
                vec = vec - lr * grad
                params = params.unflatten(vec)
            if log_f:
                log_f.write(json.dumps({
                    "epoch": epoch,
                    "loss": float(np.mean(losses)),
                    "wall_ms": 1000.0 * (time.monotonic() - t0),
                }) + "\n")
    finally:
        if log_f:
            log_f.close()
    return params


def mean_bce(params: PooledParams, views: Sequence[TurnView]) -> float:
    """Mean per-piece cross-entropy of a labeled view set (evaluation helper)."""
    rows, targets = _piece_rows(views)
    batch = batch_from_token_lists(rows)
    s, _ = batch_scores(params, batch)
    return float(np.mean(np.logaddexp(0.0, s) - targets * s))
