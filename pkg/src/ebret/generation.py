"""Exactly computable response generator and subset-inference model.

The generator is order-1 autoregressive: a pooled condition vector (context,
user, serialized subset) plus the previous token's embedding feed one tanh
layer and a full-vocabulary softmax. Every likelihood is exact, which is what
lets the semi-supervised sampler be verified against enumeration.

The inference model is the same family as the relevance scorer but pools the
response tokens as well, giving per-piece posterior-ish probabilities used as
the proposal over latent subsets.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .corpus import BOS, EOS, SEP, SubsetMask, TurnView
from .encoder import (
    PooledParams,
    batch_from_token_lists,
    batch_scores,
    batch_weighted_grad,
    init_pooled,
)
from .energy import serialize_subset
from .errors import ConfigError, DataError
from .proposal import SGDConfig, clamp_probs, subset_logprob

InfParams = PooledParams


@dataclass
class GenParams:
    """Order-1 autoregressive generator parameters."""

    emb: np.ndarray    # (V, d) shared token embeddings
    cproj: np.ndarray  # (h, d) condition projection
    pproj: np.ndarray  # (h, d) previous-token projection
    out: np.ndarray    # (V, h) output logits
    bias: np.ndarray   # (V,)

    @property
    def vocab_size(self) -> int:
        return self.emb.shape[0]

    @property
    def d_emb(self) -> int:
        return self.emb.shape[1]

    @property
    def hidden(self) -> int:
        return self.cproj.shape[0]

    def n_params(self) -> int:
        return (self.emb.size + self.cproj.size + self.pproj.size
                + self.out.size + self.bias.size)

    def flatten(self) -> np.ndarray:
        return np.concatenate([
            self.emb.ravel(), self.cproj.ravel(), self.pproj.ravel(),
            self.out.ravel(), self.bias,
        ])

    def unflatten(self, vec: np.ndarray) -> "GenParams":
        if vec.shape != (self.n_params(),):
            raise ValueError("flat vector length does not match parameter count")
        v, d, h = self.vocab_size, self.d_emb, self.hidden
        i = 0
        emb = vec[i : i + v * d].reshape(v, d).copy(); i += v * d
        cproj = vec[i : i + h * d].reshape(h, d).copy(); i += h * d
        pproj = vec[i : i + h * d].reshape(h, d).copy(); i += h * d
        out = vec[i : i + v * h].reshape(v, h).copy(); i += v * h
        bias = vec[i : i + v].copy()
        return GenParams(emb, cproj, pproj, out, bias)


def init_gen(vocab_size: int, d_emb: int, hidden: int,
             rng: np.random.Generator, scale: float = 0.1) -> GenParams:
    return GenParams(
        emb=rng.uniform(-scale, scale, size=(vocab_size, d_emb)),
        cproj=rng.uniform(-scale, scale, size=(hidden, d_emb)),
        pproj=rng.uniform(-scale, scale, size=(hidden, d_emb)),
        out=rng.uniform(-scale, scale, size=(vocab_size, hidden)),
        bias=rng.uniform(-scale, scale, size=vocab_size),
    )


def gen_condition_tokens(context: Sequence[int], user: Sequence[int],
                         mask: SubsetMask,
                         piece_tokens: Sequence[Sequence[int]]) -> list[int]:
    return list(context) + list(user) + serialize_subset(mask, piece_tokens)


def _condition_vector(params: GenParams, cond_tokens: Sequence[int]) -> np.ndarray:
    if len(cond_tokens) == 0:
        return np.zeros(params.d_emb)
    return params.emb[np.asarray(cond_tokens, dtype=np.intp)].sum(axis=0)


def _step_logits(params: GenParams, cond_tokens, prev: np.ndarray):
    cond = _condition_vector(params, cond_tokens)
    a = params.emb[prev] @ params.pproj.T + (params.cproj @ cond)[None, :]
    h = np.tanh(a)
    logits = h @ params.out.T + params.bias
    return logits, h, cond


def gen_step_logprobs(response: Sequence[int], context: Sequence[int],
                      user: Sequence[int], mask: SubsetMask,
                      piece_tokens: Sequence[Sequence[int]],
                      params: GenParams) -> np.ndarray:
    """Per-step log-probability of each response token under teacher forcing."""
    targets = np.asarray(response, dtype=np.intp)
    if len(targets) == 0 or targets[-1] != EOS:
        raise DataError("response must end with EOS")
    prev = np.concatenate([[BOS], targets[:-1]])
    cond_tokens = gen_condition_tokens(context, user, mask, piece_tokens)
    logits, _, _ = _step_logits(params, cond_tokens, prev)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    return shifted[np.arange(len(targets)), targets] - log_z


def gen_logprob(response: Sequence[int], context: Sequence[int],
                user: Sequence[int], mask: SubsetMask,
                piece_tokens: Sequence[Sequence[int]],
                params: GenParams) -> float:
    """Exact autoregressive log-likelihood of an EOS-terminated response."""
    return float(gen_step_logprobs(response, context, user, mask,
                                   piece_tokens, params).sum())


def _sample_from(probs: np.ndarray, rng: np.random.Generator) -> int:
    return int(np.searchsorted(np.cumsum(probs), rng.random(), side="right"))


def gen_sample(context: Sequence[int], user: Sequence[int], mask: SubsetMask,
               piece_tokens: Sequence[Sequence[int]], params: GenParams,
               rng: np.random.Generator, max_len: int = 24) -> list[int]:
    """Ancestral sampling until EOS or max_len tokens; rng-deterministic."""
    if max_len < 1:
        raise ConfigError("max_len must be >= 1")
    return _decode(context, user, mask, piece_tokens, params, max_len,
                   lambda probs: _sample_from(probs, rng))


def gen_greedy(context: Sequence[int], user: Sequence[int], mask: SubsetMask,
               piece_tokens: Sequence[Sequence[int]], params: GenParams,
               max_len: int = 24) -> list[int]:
    """Deterministic argmax decoding (lowest token id wins ties)."""
    if max_len < 1:
        raise ConfigError("max_len must be >= 1")
    return _decode(context, user, mask, piece_tokens, params, max_len,
                   lambda probs: int(np.argmax(probs)))


def _decode(context, user, mask, piece_tokens, params, max_len, pick) -> list[int]:
    cond_tokens = gen_condition_tokens(context, user, mask, piece_tokens)
    cond = _condition_vector(params, cond_tokens)
    base = params.cproj @ cond
    prev = BOS
    out: list[int] = []
    for _ in range(max_len):
        h = np.tanh(params.pproj @ params.emb[prev] + base)
        logits = params.out @ h + params.bias
        shifted = np.exp(logits - logits.max())
        tok = pick(shifted / shifted.sum())
        out.append(tok)
        if tok == EOS:
            break
        prev = tok
    return out


def gen_nll_grad(response: Sequence[int], context: Sequence[int],
                 user: Sequence[int], mask: SubsetMask,
                 piece_tokens: Sequence[Sequence[int]],
                 params: GenParams) -> tuple[float, np.ndarray]:
    """Total NLL of one response and its flat analytic gradient."""
    targets = np.asarray(response, dtype=np.intp)
    if len(targets) == 0 or targets[-1] != EOS:
        raise DataError("response must end with EOS")
    prev = np.concatenate([[BOS], targets[:-1]])
    cond_tokens = gen_condition_tokens(context, user, mask, piece_tokens)
    logits, h, cond = _step_logits(params, cond_tokens, prev)
    shifted = logits - logits.max(axis=1, keepdims=True)
    expo = np.exp(shifted)
    z = expo.sum(axis=1, keepdims=True)
    log_probs = shifted - np.log(z)
    nll = -float(log_probs[np.arange(len(targets)), targets].sum())
    dlogits = expo / z
    dlogits[np.arange(len(targets)), targets] -= 1.0
    g_out = dlogits.T @ h
    g_bias = dlogits.sum(axis=0)
    da = (dlogits @ params.out) * (1.0 - h**2)  # (L, h)
    g_pproj = da.T @ params.emb[prev]
    da_sum = da.sum(axis=0)
    g_cproj = np.outer(da_sum, cond)
    g_emb = np.zeros_like(params.emb)
    np.add.at(g_emb, prev, da @ params.pproj)
    if len(cond_tokens):
        d_cond = params.cproj.T @ da_sum
        np.add.at(g_emb, np.asarray(cond_tokens, dtype=np.intp), d_cond)
    grad = np.concatenate([
        g_emb.ravel(), g_cproj.ravel(), g_pproj.ravel(), g_out.ravel(), g_bias,
    ])
    return nll, grad


# ---------------------------------------------------------------------------
# Subset-inference model (proposal over latent subsets, response-aware)


def inf_input(context, user, response, piece_tokens) -> list[int]:
    return (list(context) + [SEP] + list(user) + [SEP] + list(response)
            + [SEP] + list(piece_tokens))


def inf_piece_probs(context: Sequence[int], user: Sequence[int],
                    response: Sequence[int],
                    piece_token_lists: Sequence[Sequence[int]],
                    params: InfParams) -> np.ndarray:
    if len(piece_token_lists) == 0:
        return np.zeros(0)
    batch = batch_from_token_lists(
        [inf_input(context, user, response, p) for p in piece_token_lists]
    )
    s, _ = batch_scores(params, batch)
    return clamp_probs(0.5 * (1.0 + np.tanh(0.5 * s)))


def inf_propose(context: Sequence[int], user: Sequence[int],
                response: Sequence[int],
                piece_token_lists: Sequence[Sequence[int]],
                params: InfParams,
                rng: np.random.Generator) -> tuple[SubsetMask, float]:
    """Sample a subset from the response-aware factored model; returns its
    exact log-probability under the same model."""
    probs = inf_piece_probs(context, user, response, piece_token_lists, params)
    draws = rng.random(len(probs)) < probs
    bits = 0
    for i, b in enumerate(draws):
        if b:
            bits |= 1 << i
    mask = SubsetMask(bits, len(probs))
    return mask, subset_logprob(mask, probs)


# ---------------------------------------------------------------------------
# Supervised training


def train_gen(views: Sequence[TurnView], vocab_size: int, config: SGDConfig,
              log_path: str | None = None) -> GenParams:
    """Teacher-forced SGD on exact NLL, normalized per token in each batch."""
    for v in views:
        if v.gold is None:
            raise DataError(
                f"unlabeled turn {v.session_id}/{v.turn_index} in training data"
            )
    rng = np.random.default_rng(config.seed)
    params = init_gen(vocab_size, config.d_emb, config.hidden, rng)
    vec = params.flatten()
    log_f = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for epoch in range(config.epochs):
            t0 = time.monotonic()
            lr = config.step_size(epoch)
            perm = rng.permutation(len(views))
            tokens_total, nll_total = 0, 0.0
            for start in range(0, len(perm), config.batch):
                idx = perm[start : start + config.batch]
                grad = np.zeros_like(vec)
                n_tok = sum(len(views[j].response) for j in idx)
                for j in idx:
                    v = views[j]
                    nll, g = gen_nll_grad(v.response, v.context, v.user,
                                          v.gold, v.piece_tokens, params)
                    grad += g / n_tok
                    nll_total += nll
                tokens_total += n_tok
                vec = vec - lr * grad
                params = params.unflatten(vec)
            if log_f:
                log_f.write(json.dumps({
                    "epoch": epoch,
                    "nll_per_token": nll_total / tokens_total,
                    "wall_ms": 1000.0 * (time.monotonic() - t0),
                }) + "\n")
    finally:
        if log_f:
            log_f.close()
    return params


def train_inf(views: Sequence[TurnView], vocab_size: int, config: SGDConfig,
              log_path: str | None = None) -> InfParams:
    """Per-piece cross-entropy SGD for the response-aware inference model."""
    from .proposal import bce_loss_and_grad

    rows, targets = [], []
    for v in views:
        if v.gold is None:
            raise DataError(
                f"unlabeled turn {v.session_id}/{v.turn_index} in training data"
            )
        for i, piece in enumerate(v.piece_tokens):
            rows.append(inf_input(v.context, v.user, v.response, piece))
            targets.append(float(v.gold.bit(i)))
    batch = batch_from_token_lists(rows)
    targets_arr = np.array(targets)
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
                loss, grad = bce_loss_and_grad(params, batch.rows(idx),
                                               targets_arr[idx])
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
