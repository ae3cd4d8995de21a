"""Sum-pooled MLP scorer shared by the relevance, energy, and inference models.

Forward pass for a token sequence x:

    s = w2 . tanh(W1 @ sum_t emb[x_t] + b1) + b2

The encoder is deliberately replaceable: downstream code relies only on
"token sequence in, scalar out" plus exact analytic gradients. Batched
scoring works on token *count* matrices so that scoring many subsets of the
same turn reuses one small matmul.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass
class PooledParams:
    """Parameters of one pooled scorer. All arrays are float64."""

    emb: np.ndarray  # (V, d) embedding table
    w1: np.ndarray   # (h, d) hidden layer
    b1: np.ndarray   # (h,)
    w2: np.ndarray   # (h,)  scalar head
    b2: float

    @property
    def vocab_size(self) -> int:
        return self.emb.shape[0]

    @property
    def d_emb(self) -> int:
        return self.emb.shape[1]

    @property
    def hidden(self) -> int:
        return self.w1.shape[0]

    def n_params(self) -> int:
        return self.emb.size + self.w1.size + self.b1.size + self.w2.size + 1

    def copy(self) -> "PooledParams":
        return PooledParams(
            self.emb.copy(), self.w1.copy(), self.b1.copy(), self.w2.copy(),
            float(self.b2),
        )

    def flatten(self) -> np.ndarray:
        return np.concatenate(
            [self.emb.ravel(), self.w1.ravel(), self.b1, self.w2, [self.b2]]
        )

    def unflatten(self, vec: np.ndarray) -> "PooledParams":
        """Rebuild a params object with this one's shapes from a flat vector."""
        if vec.shape != (self.n_params(),):
            raise ValueError("flat vector length does not match parameter count")
        v, d, h = self.vocab_size, self.d_emb, self.hidden
        i = 0
        emb = vec[i : i + v * d].reshape(v, d).copy(); i += v * d
        w1 = vec[i : i + h * d].reshape(h, d).copy(); i += h * d
        b1 = vec[i : i + h].copy(); i += h
        w2 = vec[i : i + h].copy(); i += h
        b2 = float(vec[i])
        return PooledParams(emb, w1, b1, w2, b2)


def init_pooled(
    vocab_size: int, d_emb: int, hidden: int, rng: np.random.Generator,
    scale: float = 0.1,
) -> PooledParams:
    """Uniform [-scale, scale] initialization of every tensor."""
    return PooledParams(
        emb=rng.uniform(-scale, scale, size=(vocab_size, d_emb)),
        w1=rng.uniform(-scale, scale, size=(hidden, d_emb)),
        b1=rng.uniform(-scale, scale, size=hidden),
        w2=rng.uniform(-scale, scale, size=hidden),
        b2=float(rng.uniform(-scale, scale)),
    )


def score_tokens(params: PooledParams, tokens: Sequence[int]) -> float:
    """Scalar score of one token sequence. Empty input pools to the zero vector."""
    if len(tokens) == 0:
        x = np.zeros(params.d_emb)
    else:
        x = params.emb[np.asarray(tokens, dtype=np.intp)].sum(axis=0)
    h = np.tanh(params.w1 @ x + params.b1)
    return float(params.w2 @ h + params.b2)


# ---------------------------------------------------------------------------
# Batched scoring over token-count rows


@dataclass
class TokenBatch:
    """M pooled inputs sharing one unique-token axis.

    `counts[m, u]` is the multiplicity of token `uniq[u]` in row m; the pooled
    vector of row m is counts[m] @ emb[uniq].
    """

    uniq: np.ndarray    # (U,) int token ids
    counts: np.ndarray  # (M, U) float64

    def rows(self, idx: np.ndarray) -> "TokenBatch":
        return TokenBatch(self.uniq, self.counts[idx])

    @property
    def n_rows(self) -> int:
        return self.counts.shape[0]


def batch_from_token_lists(token_lists: Sequence[Sequence[int]]) -> TokenBatch:
    uniq = np.array(sorted({t for row in token_lists for t in row}), dtype=np.intp)
    pos = {int(t): i for i, t in enumerate(uniq)}
    counts = np.zeros((len(token_lists), len(uniq)))
    for m, row in enumerate(token_lists):
        for t in row:
            counts[m, pos[int(t)]] += 1.0
    return TokenBatch(uniq, counts)


@dataclass
class BatchCache:
    x: np.ndarray  # (M, d) pooled embeddings
    h: np.ndarray  # (M, h) hidden activations


def batch_scores(params: PooledParams, batch: TokenBatch) -> tuple[np.ndarray, BatchCache]:
    x = batch.counts @ params.emb[batch.uniq]
    h = np.tanh(x @ params.w1.T + params.b1)
    s = h @ params.w2 + params.b2
    return s, BatchCache(x, h)


def batch_weighted_grad(
    params: PooledParams, batch: TokenBatch, cache: BatchCache, coeff: np.ndarray
) -> np.ndarray:
    """Flat gradient of sum_m coeff[m] * s_m with respect to all parameters."""
    # d s_m / d a_m = w2 * (1 - h_m^2), a = W1 x + b1
    g = (coeff[:, None] * (1.0 - cache.h**2)) * params.w2[None, :]  # (M, h)
    g_w1 = g.T @ cache.x
    g_b1 = g.sum(axis=0)
    g_w2 = (coeff[:, None] * cache.h).sum(axis=0)
    g_b2 = float(coeff.sum())
    dx = g @ params.w1  # (M, d), per-row d s/d x already weighted
    g_emb = np.zeros_like(params.emb)
    g_emb[batch.uniq] = batch.counts.T @ dx
    return np.concatenate([g_emb.ravel(), g_w1.ravel(), g_b1, g_w2, [g_b2]])
