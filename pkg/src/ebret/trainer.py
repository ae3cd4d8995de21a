"""Maximum-likelihood training of the energy scorer.

The negative-log-likelihood gradient for one labeled turn is

    dU(gold)/dtheta - E_{mask ~ p}[ dU(mask)/dtheta ]

with p the (residual or nonresidual) energy distribution itself. Three
interchangeable estimators supply the expectation term: exact enumeration
(small-N oracle), self-normalized importance sampling, and Metropolis
independence sampling, the latter two proposing from the frozen factored
relevance model. All gradients are analytic and validated against central
finite differences.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .corpus import TurnView
from .encoder import batch_scores, batch_weighted_grad, init_pooled
from .energy import (
    NONRESIDUAL,
    RESIDUAL,
    EnergyMode,
    EnergyParams,
    design_batch,
    subset_design,
)
from .errors import ConfigError, DataError, EstimatorError, ScaleError
from .proposal import ProposalParams, masks_logprob, piece_probs, sample_subset

EXACT_MAX_N = 12
FD_MAX_N = 10

EXACT, IS, MIS = "exact", "is", "mis"


@dataclass
class GradEstimate:
    """One turn's NLL gradient, flat and aligned to EnergyParams.flatten().

    `expectation_term` is the estimate of E[dU/dtheta]; the data term is
    gradient + expectation_term. Diagnostics carry the estimator-specific
    quality measures plus the gold-subset energy.
    """

    gradient: np.ndarray
    expectation_term: np.ndarray
    diagnostics: dict = field(default_factory=dict)


@dataclass(frozen=True)
class TrainerConfig:
    estimator: str = IS
    sample_size: int = 12
    chain_steps: int = 12
    lr: float = 0.1
    lr_decay: float = 0.02
    epochs: int = 50
    batch: int = 8
    seed: int = 0
    mode: str = RESIDUAL
    d_emb: int = 32
    hidden: int = 32

    def step_size(self, epoch: int) -> float:
        return self.lr / (1.0 + self.lr_decay * epoch)

    def validate(self) -> None:
        if self.estimator not in (EXACT, IS, MIS):
            raise ConfigError(f"unknown estimator {self.estimator!r}")
        if self.mode not in (RESIDUAL, NONRESIDUAL):
            raise ConfigError(f"unknown energy mode {self.mode!r}")
        if self.sample_size < 1 or self.chain_steps < 1:
            raise ConfigError("sample_size and chain_steps must be >= 1")


def mis_accept(log_w_new: float, log_w_old: float, eta: float) -> bool:
    """Metropolis independence rule: accept iff eta <= min(1, w_new/w_old)."""
    if log_w_new >= log_w_old:
        return True
    return eta <= math.exp(log_w_new - log_w_old)


# ---------------------------------------------------------------------------
# Per-turn scoring helpers


class _TurnScorer:
    """Scores and differentiates arbitrary subsets of one turn's KB."""

    def __init__(self, view: TurnView, params: EnergyParams):
        if view.gold is None:
            raise DataError("energy training requires a gold subset")
        self.view = view
        self.params = params
        self.n = view.n_pieces
        self.design = subset_design(view.context, view.user, view.piece_tokens)

    def scores(self, bit_matrix: np.ndarray):
        batch = design_batch(self.design, bit_matrix)
        s, cache = batch_scores(self.params, batch)
        return s, batch, cache

    def weighted_score_grad(self, batch, cache, coeff: np.ndarray) -> np.ndarray:
        return batch_weighted_grad(self.params, batch, cache, coeff)

    def gold_row(self) -> np.ndarray:
        return np.array(
            [[self.view.gold.bit(i) for i in range(self.n)]], dtype=np.int64
        )

    def data_term(self) -> tuple[float, np.ndarray]:
        """Gold-subset energy and the flat gradient dU(gold)/dtheta."""
        s, batch, cache = self.scores(self.gold_row())
        grad_s = self.weighted_score_grad(batch, cache, np.ones(1))
        return -float(s[0]), -grad_s


def _all_bits(n: int) -> np.ndarray:
    bits = np.arange(1 << n, dtype=np.int64)
    if n == 0:
        return np.zeros((1, 0), dtype=np.int64)
    return (bits[:, None] >> np.arange(n)) & 1


def _resolve_probs(view: TurnView, mode: EnergyMode,
                   proposal_probs: np.ndarray | None,
                   needed: bool) -> np.ndarray | None:
    if proposal_probs is not None:
        return np.asarray(proposal_probs, dtype=float)
    if mode.kind == RESIDUAL:
        return piece_probs(view.context, view.user, view.piece_tokens,
                           mode.reference)
    if needed:
        raise ConfigError(
            "nonresidual estimation needs explicit proposal probabilities"
        )
    return None


def exact_nll(view: TurnView, params: EnergyParams, mode: EnergyMode,
              ref_probs: np.ndarray | None = None) -> float:
    """-log p(gold) by full enumeration; oracle for gradient checks."""
    from .energy import enumerate_unnorm_logps

    lps = enumerate_unnorm_logps(view.context, view.user, view.piece_tokens,
                                 params, mode, ref_probs)
    m = float(lps.max())
    log_z = m + math.log(float(np.exp(lps - m).sum()))
    return log_z - float(lps[view.gold.bits])


def mle_grad_exact(view: TurnView, params: EnergyParams, mode: EnergyMode,
                   proposal_probs: np.ndarray | None = None) -> GradEstimate:
    """Exact NLL gradient by enumerating all 2^N subsets (N <= 12)."""
    if view.n_pieces > EXACT_MAX_N:
        raise ScaleError(f"exact gradient capped at N={EXACT_MAX_N}")
    scorer = _TurnScorer(view, params)
    probs = _resolve_probs(view, mode, proposal_probs, needed=False)
    bit_matrix = _all_bits(scorer.n)
    s, batch, cache = scorer.scores(bit_matrix)
    logits = s if mode.kind == NONRESIDUAL else masks_logprob(bit_matrix, probs) + s
    shifted = logits - logits.max()
    p = np.exp(shifted)
    p /= p.sum()
    # NLL grad = sum_m (p_m - delta_gold,m) * ds_m/dtheta
    coeff = p.copy()
    coeff[view.gold.bits] -= 1.0
    gradient = scorer.weighted_score_grad(batch, cache, coeff)
    expectation = scorer.weighted_score_grad(batch, cache, -p)
    return GradEstimate(gradient, expectation,
                        {"data_energy": -float(s[view.gold.bits])})


def _distinct(bit_rows: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Collapse sampled masks to distinct rows; returns (rows, packed, inverse)."""
    n = bit_rows.shape[1]
    packed = bit_rows @ (np.int64(1) << np.arange(n, dtype=np.int64)) if n else np.zeros(len(bit_rows), dtype=np.int64)
    uniq, inverse = np.unique(packed, return_inverse=True)
    rows = ((uniq[:, None] >> np.arange(n)) & 1) if n else np.zeros((1, 0), dtype=np.int64)
    return rows, uniq, inverse


def is_grad_estimate(view: TurnView, params: EnergyParams, mode: EnergyMode,
                     sample_size: int, rng: np.random.Generator,
                     proposal_probs: np.ndarray | None = None) -> GradEstimate:
    """Self-normalized importance sampling estimate of the NLL gradient.

    Draws from the factored proposal; weights are exp(-U)/p_ref(mask) with
    the residual reference canceling to exp(-U), normalized in log domain
    with max-subtraction. Raises EstimatorError when every weight underflows.
    """
    scorer = _TurnScorer(view, params)
    probs = _resolve_probs(view, mode, proposal_probs, needed=True)
    draws = (rng.random((sample_size, scorer.n)) < probs).astype(np.int64)
    rows, _, inverse = _distinct(draws)
    counts = np.bincount(inverse, minlength=len(rows)).astype(float)
    s, batch, cache = scorer.scores(rows)
    if mode.kind == RESIDUAL:
        logw = s  # p~/q = p_ref exp(-U) / p_ref = exp(-U), and -U = s
    else:
        logw = s - masks_logprob(rows, probs)
    if not np.all(np.isfinite(logw)):
        raise EstimatorError("non-finite importance weights")
    shifted = np.exp(logw - logw.max())
    totals = counts * shifted
    denom = totals.sum()
    if denom <= 0.0 or not math.isfinite(denom):
        raise EstimatorError("all importance weights underflowed")
    omega = totals / denom
    expectation = scorer.weighted_score_grad(batch, cache, -omega)
    data_energy, data_grad = scorer.data_term()
    ess = denom**2 / float((counts * shifted**2).sum())
    return GradEstimate(
        data_grad - expectation,
        expectation,
        {"effective_sample_size": ess, "data_energy": data_energy},
    )


def mis_grad_estimate(view: TurnView, params: EnergyParams, mode: EnergyMode,
                      chain_steps: int, rng: np.random.Generator,
                      proposal_probs: np.ndarray | None = None) -> GradEstimate:
    """Metropolis independence sampling estimate of the NLL gradient.

    The chain starts from a proposal draw; each of the chain_steps steps
    proposes independently from the factored model and accepts on the
    target/proposal weight ratio. All post-initialization states are
    averaged (no burn-in discard).
    """
    scorer = _TurnScorer(view, params)
    probs = _resolve_probs(view, mode, proposal_probs, needed=True)
    draws = (rng.random((chain_steps + 1, scorer.n)) < probs).astype(np.int64)
    etas = rng.random(chain_steps)
    rows, _, inverse = _distinct(draws)
    s, batch, cache = scorer.scores(rows)
    if mode.kind == RESIDUAL:
        logw = s
    else:
        logw = s - masks_logprob(rows, probs)
    current = inverse[0]
    visits = np.zeros(len(rows))
    accepted = 0
    for tau in range(chain_steps):
        cand = inverse[tau + 1]
        if mis_accept(float(logw[cand]), float(logw[current]), float(etas[tau])):
            current = cand
            accepted += 1
        visits[current] += 1.0
    expectation = scorer.weighted_score_grad(batch, cache, -visits / chain_steps)
    data_energy, data_grad = scorer.data_term()
    return GradEstimate(
        data_grad - expectation,
        expectation,
        {"acceptance_rate": accepted / chain_steps, "data_energy": data_energy},
    )


def finite_diff_check(params: EnergyParams, view: TurnView, mode: EnergyMode,
                      epsilon: float = 1e-4) -> float:
    """Max relative error of the analytic exact gradient vs central differences.

    Coordinates where both sides vanish (below 1e-12) contribute zero; the
    relative error denominator is floored at 1e-6.
    """
    if view.n_pieces > FD_MAX_N:
        raise ScaleError(f"finite differences capped at N={FD_MAX_N}")
    analytic = mle_grad_exact(view, params, mode).gradient
    vec = params.flatten()
    worst = 0.0
    for i in range(len(vec)):
        orig = vec[i]
        vec[i] = orig + epsilon
        hi = exact_nll(view, params.unflatten(vec), mode)
        vec[i] = orig - epsilon
        lo = exact_nll(view, params.unflatten(vec), mode)
        vec[i] = orig
        numeric = (hi - lo) / (2.0 * epsilon)
        a = analytic[i]
        if abs(a) < 1e-12 and abs(numeric) < 1e-12:
            continue
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-6)
        worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# Training loop


def train_energy(views: Sequence[TurnView], proposal_params: ProposalParams,
                 config: TrainerConfig, log_path: str | None = None) -> EnergyParams:
    """SGD on the configured estimator's gradients; proposal stays frozen.

    Per-turn rng streams are derived from (seed, epoch, turn index) so the
    result is independent of batching internals. Aborts with EstimatorError
    if more than half the turns in an epoch fail to produce an estimate.
    """
    config.validate()
    if any(v.gold is None for v in views):
        raise DataError("energy training requires a fully labeled corpus")
    vocab_size = proposal_params.vocab_size
    rng = np.random.default_rng(config.seed)
    params = init_pooled(vocab_size, config.d_emb, config.hidden, rng)
    vec = params.flatten()
    mode = (EnergyMode.residual(proposal_params) if config.mode == RESIDUAL
            else EnergyMode.nonresidual())
    turn_probs = [
        piece_probs(v.context, v.user, v.piece_tokens, proposal_params)
        for v in views
    ]
    log_f = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for epoch in range(config.epochs):
            t0 = time.monotonic()
            lr = config.step_size(epoch)
            order = rng.permutation(len(views))
            energies, quality = [], []
            failures = 0
            for start in range(0, len(order), config.batch):
                idx = order[start : start + config.batch]
                grads = []
                for j in idx:
                    view, probs = views[j], turn_probs[j]
                    turn_rng = np.random.default_rng([config.seed, epoch, int(j)])
                    try:
                        if config.estimator == EXACT:
                            est = mle_grad_exact(view, params, mode, probs)
                        elif config.estimator == IS:
                            est = is_grad_estimate(view, params, mode,
                                                   config.sample_size, turn_rng, probs)
                        else:
                            est = mis_grad_estimate(view, params, mode,
                                                    config.chain_steps, turn_rng, probs)
                    except EstimatorError:
                        failures += 1
                        continue
                    grads.append(est.gradient)
                    energies.append(est.diagnostics["data_energy"])
                    for key in ("effective_sample_size", "acceptance_rate"):
                        if key in est.diagnostics:
                            quality.append(est.diagnostics[key])
                if grads:
                    vec = vec - lr * np.mean(grads, axis=0)
                    params = params.unflatten(vec)
            if failures > 0.5 * len(views):
                raise EstimatorError(
                    f"estimator failed on {failures}/{len(views)} turns in epoch {epoch}"
                )
            if log_f:
                log_f.write(json.dumps({
                    "epoch": epoch,
                    "mean_data_energy": float(np.mean(energies)) if energies else None,
                    "mean_acceptance_or_ess": float(np.mean(quality)) if quality else None,
                    "wall_ms": 1000.0 * (time.monotonic() - t0),
                }) + "\n")
    finally:
        if log_f:
            log_f.close()
    return params
