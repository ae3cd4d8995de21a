"""Two-stage semi-supervised training over mixed labeled/unlabeled dialogs.

After supervised pretraining, the retrieval-side models (factored relevance
scorer and energy scorer) are frozen; only the generator and the subset
inference model keep training. Unlabeled turns get latent subsets from a
persistent turn-level Metropolis independence sampler whose importance
weights come either from the factored retriever (needs the full KB) or from
the energy scorer (needs only the selected pieces; the unknown normalizer
cancels in acceptance ratios). The pseudo-labeling baseline accepts every
proposal without computing weights.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .corpus import SubsetMask, TurnView
from .encoder import PooledParams
from .energy import NONRESIDUAL, EnergyParams, energy as energy_of
from .errors import ConfigError, WeightSourceError
from .generation import (
    GenParams,
    InfParams,
    gen_logprob,
    gen_nll_grad,
    inf_piece_probs,
    inf_propose,
)
from .proposal import (
    ProposalParams,
    bce_loss_and_grad,
    masks_logprob,
    piece_probs,
    subset_logprob,
)
from .encoder import batch_from_token_lists
from .generation import inf_input
from .trainer import mis_accept

PL, JSA = "pl", "jsa"
TRADITIONAL, ENTRIEVER = "traditional", "entriever"


@dataclass
class ChainState:
    """Per-turn sampler cache: latest accepted subset and its log-weight.

    Absent (mask None) until the first proposal, which is then accepted
    unconditionally. Persists across epochs.
    """

    mask: SubsetMask | None = None
    logw: float = 0.0


@dataclass(frozen=True)
class SemiConfig:
    method: str = JSA
    weight_source: str = ENTRIEVER
    unlabeled_ratio: float = 1.0
    lr: float = 0.05
    epochs: int = 20
    seed: int = 0
    # Treat unlabeled sessions' KBs as unavailable when computing weights;
    # the traditional source then degrades to selected-piece factors only.
    hide_unlabeled_kb: bool = False

    def validate(self) -> None:
        if self.method not in (PL, JSA):
            raise ConfigError(f"unknown method {self.method!r}")
        if self.weight_source not in (TRADITIONAL, ENTRIEVER):
            raise ConfigError(f"unknown weight source {self.weight_source!r}")
        if self.unlabeled_ratio < 0:
            raise ConfigError("unlabeled_ratio must be >= 0")


@dataclass(frozen=True)
class FrozenModels:
    """Pretrained models entering stage two; retrieval side stays frozen."""

    proposal: ProposalParams
    gen: GenParams
    inf: InfParams
    energy: EnergyParams | None = None
    energy_kind: str = NONRESIDUAL


# ---------------------------------------------------------------------------
# Importance weights (log domain, unnormalized)


def importance_logweight_traditional(
    mask: SubsetMask, view: TurnView, proposal_params: ProposalParams,
    gen_params: GenParams, inf_params: InfParams,
) -> float:
    """log p_ret(mask) + log p_gen(response|mask) - log q_inf(mask).

    Needs every piece of the KB for the factored retrieval probability;
    raises WeightSourceError when the KB is unavailable.
    """
    if not view.kb_available:
        raise WeightSourceError(
            f"turn {view.session_id}/{view.turn_index} has no KB; the factored "
            "retrieval probability cannot be computed"
        )
    probs = piece_probs(view.context, view.user, view.piece_tokens, proposal_params)
    inf_probs = inf_piece_probs(view.context, view.user, view.response,
                                view.piece_tokens, inf_params)
    return (
        subset_logprob(mask, probs)
        + gen_logprob(view.response, view.context, view.user, mask,
                      view.piece_tokens, gen_params)
        - subset_logprob(mask, inf_probs)
    )


def importance_logweight_positive_only(
    mask: SubsetMask, view: TurnView, proposal_params: ProposalParams,
    gen_params: GenParams, inf_params: InfParams,
) -> float:
    """Degraded traditional weight when the KB cannot be consulted.

    Keeps only the selected pieces' relevance factors (their text travels
    with the latent itself) and drops every unselected factor. This is the
    workaround the energy weight makes unnecessary.
    """
    acc = 0.0
    for i in mask.indices():
        from .proposal import piece_prob

        acc += math.log(piece_prob(view.context, view.user,
                                   view.piece_tokens[i], proposal_params))
    inf_probs = inf_piece_probs(view.context, view.user, view.response,
                                view.piece_tokens, inf_params)
    return (
        acc
        + gen_logprob(view.response, view.context, view.user, mask,
                      view.piece_tokens, gen_params)
        - subset_logprob(mask, inf_probs)
    )


def importance_logweight_entriever(
    mask: SubsetMask, view: TurnView, energy_params: EnergyParams,
    gen_params: GenParams, inf_params: InfParams,
) -> float:
    """-U(mask) + log p_gen(response|mask) - log q_inf(mask).

    Valid up to the additive constant -log Z, which cancels in acceptance
    ratios; only the selected pieces' text is read.
    """
    inf_probs = inf_piece_probs(view.context, view.user, view.response,
                                view.piece_tokens, inf_params)
    return (
        -energy_of(view.context, view.user, mask, view.piece_tokens, energy_params)
        + gen_logprob(view.response, view.context, view.user, mask,
                      view.piece_tokens, gen_params)
        - subset_logprob(mask, inf_probs)
    )


# ---------------------------------------------------------------------------
# Turn-level sampler


def mis_turn_step(
    view: TurnView, chain: ChainState,
    weight_fn: Callable[[SubsetMask], float],
    inf_params: InfParams, rng: np.random.Generator,
) -> SubsetMask:
    """One propose/accept-or-reject step of the turn-level sampler.

    An empty cache accepts the first proposal unconditionally. Returns the
    (possibly unchanged) cached subset.
    """
    proposed, _ = inf_propose(view.context, view.user, view.response,
                              view.piece_tokens, inf_params, rng)
    logw = weight_fn(proposed)
    if chain.mask is None:
        chain.mask, chain.logw = proposed, logw
        return proposed
    eta = float(rng.random())
    if mis_accept(logw, chain.logw, eta):
        chain.mask, chain.logw = proposed, logw
    return chain.mask


def exact_turn_posterior(view: TurnView, proposal_params: ProposalParams,
                         gen_params: GenParams) -> np.ndarray:
    """Enumerated posterior over subsets given the observed response.

    p(mask | context, user, response) under the joint factored-retrieval x
    generation model; small-N diagnostic used to validate the sampler.
    """
    n = view.n_pieces
    probs = piece_probs(view.context, view.user, view.piece_tokens, proposal_params)
    bits = np.arange(1 << n, dtype=np.int64)
    bit_matrix = (bits[:, None] >> np.arange(n)) & 1
    log_joint = masks_logprob(bit_matrix, probs)
    for b in range(1 << n):
        log_joint[b] += gen_logprob(view.response, view.context, view.user,
                                    SubsetMask(int(b), n), view.piece_tokens,
                                    gen_params)
    shifted = np.exp(log_joint - log_joint.max())
    return shifted / shifted.sum()


# ---------------------------------------------------------------------------
# Stage-two training


def _mix_epoch(labeled: Sequence, unlabeled: Sequence, ratio: float,
               rng: np.random.Generator) -> list[tuple[bool, int]]:
    """Choose this epoch's sessions: all labeled plus ratio * labeled
    unlabeled sessions (capped by the pool), shuffled together."""
    n_l = len(labeled)
    n_u = min(len(unlabeled), int(round(ratio * n_l))) if n_l else len(unlabeled)
    chosen = [(True, int(i)) for i in range(n_l)]
    if n_u:
        picks = rng.permutation(len(unlabeled))[:n_u]
        chosen += [(False, int(i)) for i in picks]
    order = rng.permutation(len(chosen))
    return [chosen[int(i)] for i in order]


def jsa_train(
    labeled_sessions: Sequence[Sequence[TurnView]],
    unlabeled_sessions: Sequence[Sequence[TurnView]],
    models: FrozenModels, config: SemiConfig,
    log_path: str | None = None,
) -> tuple[GenParams, InfParams, list[dict]]:
    """Stage-two training: sample latent subsets for unlabeled turns, then
    ascend the generator and inference log-likelihoods per session.

    The proposal and energy models are read-only throughout. Returns the
    updated (gen, inf) parameters and the per-epoch history.
    """
    config.validate()
    if config.method == JSA and config.weight_source == ENTRIEVER:
        if models.energy is None:
            raise ConfigError("entriever weight source requires energy params")
        if models.energy_kind != NONRESIDUAL:
            raise ConfigError(
                "entriever weight source requires the nonresidual energy form"
            )
    rng = np.random.default_rng(config.seed)
    gen_params = models.gen
    inf_params = models.inf
    gen_vec = gen_params.flatten()
    inf_vec = inf_params.flatten()
    chains: dict[tuple[str, int], ChainState] = {}
    history: list[dict] = []
    log_f = open(log_path, "w", encoding="utf-8") if log_path else None

    def weight_fn_for(view: TurnView) -> Callable[[SubsetMask], float]:
        if config.weight_source == ENTRIEVER:
            return lambda m: importance_logweight_entriever(
                m, view, models.energy, gen_params, inf_params)
        if config.hide_unlabeled_kb:
            return lambda m: importance_logweight_positive_only(
                m, view, models.proposal, gen_params, inf_params)
        return lambda m: importance_logweight_traditional(
            m, view, models.proposal, gen_params, inf_params)

    try:
        for epoch in range(config.epochs):
            t0 = time.monotonic()
            accepted = 0
            steps = 0
            gen_nll_sum, gen_tokens = 0.0, 0
            inf_nll_sum, inf_pieces = 0.0, 0
            labeled_seen, unlabeled_seen = 0, 0
            for is_labeled, idx in _mix_epoch(
                labeled_sessions, unlabeled_sessions, config.unlabeled_ratio, rng
            ):
                session = (labeled_sessions if is_labeled else unlabeled_sessions)[idx]
                if is_labeled:
                    labeled_seen += 1
                    latents = [view.gold for view in session]
                else:
                    unlabeled_seen += 1
                    latents = []
                    for view in session:
                        chain = chains.setdefault(
                            (view.session_id, view.turn_index), ChainState()
                        )
                        if config.method == PL:
                            mask, _ = inf_propose(
                                view.context, view.user, view.response,
                                view.piece_tokens, inf_params, rng)
                            chain.mask = mask
                            accepted += 1
                            steps += 1
                        else:
                            before = chain.mask
                            mask = mis_turn_step(view, chain, weight_fn_for(view),
                                                 inf_params, rng)
                            accepted += int(mask is not before)
                            steps += 1
                        latents.append(chain.mask)
                # generator ascent, normalized per token within the session
                n_tok = sum(len(v.response) for v in session)
                gen_grad = np.zeros_like(gen_vec)
                for view, mask in zip(session, latents):
                    nll, g = gen_nll_grad(view.response, view.context, view.user,
                                          mask, view.piece_tokens, gen_params)
                    gen_grad += g / n_tok
                    gen_nll_sum += nll
                gen_tokens += n_tok
                gen_vec = gen_vec - config.lr * gen_grad
                gen_params = gen_params.unflatten(gen_vec)
                # inference ascent: per-piece cross-entropy against the latents
                rows, targets = [], []
                for view, mask in zip(session, latents):
                    for i, piece in enumerate(view.piece_tokens):
                        rows.append(inf_input(view.context, view.user,
                                              view.response, piece))
                        targets.append(float(mask.bit(i)))
                if rows:
                    batch = batch_from_token_lists(rows)
                    loss, grad = bce_loss_and_grad(inf_params, batch,
                                                   np.array(targets))
                    inf_nll_sum += loss * len(rows)
                    inf_pieces += len(rows)
                    inf_vec = inf_vec - config.lr * grad
                    inf_params = inf_params.unflatten(inf_vec)
            row = {
                "epoch": epoch,
                "gen_nll": gen_nll_sum / max(gen_tokens, 1),
                "inf_nll": inf_nll_sum / max(inf_pieces, 1),
                "acceptance_rate": (accepted / steps) if steps else 1.0,
                "labeled_seen": labeled_seen,
                "unlabeled_seen": unlabeled_seen,
            }
            history.append(row)
            if log_f:
                log_f.write(json.dumps(
                    row | {"wall_ms": 1000.0 * (time.monotonic() - t0)}
                ) + "\n")
    finally:
        if log_f:
            log_f.close()
    return gen_params, inf_params, history


def pl_train(
    labeled_sessions: Sequence[Sequence[TurnView]],
    unlabeled_sessions: Sequence[Sequence[TurnView]],
    models: FrozenModels, config: SemiConfig,
    log_path: str | None = None,
) -> tuple[GenParams, InfParams, list[dict]]:
    """Pseudo-labeling baseline: jsa_train with unconditional acceptance."""
    from dataclasses import replace

    return jsa_train(labeled_sessions, unlabeled_sessions, models,
                     replace(config, method=PL), log_path)
