"""Propose-then-rescore retrieval and its exact-argmax oracle."""

import numpy as np
import pytest

from ebret.corpus import (
    SubsetMask,
    SyntheticConfig,
    build_vocab,
    encode_corpus,
    generate_synthetic,
)
from ebret.encoder import PooledParams, init_pooled
from ebret.energy import EnergyMode
from ebret.proposal import piece_probs, threshold_decode
from ebret.rescoring import oracle_retrieve, rescore_retrieve


@pytest.fixture(scope="module")
def fixture():
    cfg = SyntheticConfig(num_sessions=8, entities=3, slots=2,
                          turns_per_session=3, correlation_strength=0.6, seed=11)
    corpus = generate_synthetic(cfg)
    vocab = build_vocab(corpus)
    views = [v for v in encode_corpus(corpus, vocab) if v.gold.bits != 0]
    rng = np.random.default_rng(0)
    proposal = init_pooled(len(vocab), 8, 8, rng)
    return vocab, views, proposal


def constant_energy(vocab_size, bias=0.5):
    return PooledParams(
        emb=np.zeros((vocab_size, 4)), w1=np.zeros((4, 4)), b1=np.zeros(4),
        w2=np.zeros(4), b2=bias,
    )


class TestRescoreRetrieve:
    def test_constant_energy_returns_proposal_top1(self, fixture):
        vocab, views, proposal = fixture
        params = constant_energy(len(vocab))
        for view in views[:5]:
            probs = piece_probs(view.context, view.user, view.piece_tokens,
                                proposal)
            top1 = threshold_decode(probs, 0.5)
            got, ranked = rescore_retrieve(view.context, view.user,
                                           view.piece_tokens, proposal, params,
                                           EnergyMode.nonresidual(), 16)
            assert got == top1
            assert len(ranked) == 16

    def test_k1_ignores_energy(self, fixture):
        vocab, views, proposal = fixture
        params = init_pooled(len(vocab), 8, 8, np.random.default_rng(3))
        for view in views[:5]:
            probs = piece_probs(view.context, view.user, view.piece_tokens,
                                proposal)
            top1 = threshold_decode(probs, 0.5)
            got, _ = rescore_retrieve(view.context, view.user,
                                      view.piece_tokens, proposal, params,
                                      EnergyMode.nonresidual(), 1)
            assert got == top1

    def test_ranking_invariant_under_energy_shift(self, fixture):
        vocab, views, proposal = fixture
        params = init_pooled(len(vocab), 8, 8, np.random.default_rng(4))
        shifted = params.copy()
        shifted.b2 += 2.5
        view = views[0]
        _, a = rescore_retrieve(view.context, view.user, view.piece_tokens,
                                proposal, params, EnergyMode.nonresidual(), 8)
        _, b = rescore_retrieve(view.context, view.user, view.piece_tokens,
                                proposal, shifted, EnergyMode.nonresidual(), 8)
        assert [c.mask for c in a] == [c.mask for c in b]

    def test_candidates_carry_scores(self, fixture):
        vocab, views, proposal = fixture
        params = init_pooled(len(vocab), 8, 8, np.random.default_rng(5))
        view = views[0]
        _, ranked = rescore_retrieve(view.context, view.user,
                                     view.piece_tokens, proposal, params,
                                     EnergyMode.nonresidual(), 8)
        scores = [c.energy_score for c in ranked]
        assert all(s is not None for s in scores)
        assert scores == sorted(scores, reverse=True)


class TestOracleRetrieve:
    def test_constant_energy_returns_lex_smallest(self, fixture):
        vocab, views, proposal = fixture
        params = constant_energy(len(vocab))
        got = oracle_retrieve(views[0].context, views[0].user,
                              views[0].piece_tokens, params,
                              EnergyMode.nonresidual())
        assert got == SubsetMask(0, 6)

    def test_residual_zero_energy_is_reference_mode(self, fixture):
        vocab, views, proposal = fixture
        params = PooledParams(
            emb=np.zeros((len(vocab), 4)), w1=np.zeros((4, 4)),
            b1=np.zeros(4), w2=np.zeros(4), b2=0.0,
        )
        mode = EnergyMode.residual(proposal)
        for view in views[:5]:
            probs = piece_probs(view.context, view.user, view.piece_tokens,
                                proposal)
            if np.any(np.abs(probs - 0.5) < 1e-6):
                continue
            got = oracle_retrieve(view.context, view.user, view.piece_tokens,
                                  params, mode)
            assert got == threshold_decode(probs, 0.5)

    def test_agrees_with_rescoring_when_argmax_in_candidates(self, fixture):
        vocab, views, proposal = fixture
        rng = np.random.default_rng(6)
        hits = 0
        for trial in range(20):
            params = init_pooled(len(vocab), 6, 6, rng)
            view = views[trial % len(views)]
            mode = EnergyMode.nonresidual()
            exact = oracle_retrieve(view.context, view.user,
                                    view.piece_tokens, params, mode)
            got, ranked = rescore_retrieve(view.context, view.user,
                                           view.piece_tokens, proposal, params,
                                           mode, 16)
            if exact in [c.mask for c in ranked]:
                hits += 1
                assert got == exact
        assert hits > 0
