"""Subset energy scorer: serialization, both modes, exact enumeration."""

import math

import numpy as np
import pytest

from ebret.corpus import (
    SEP,
    SubsetMask,
    SyntheticConfig,
    all_masks,
    build_vocab,
    encode_corpus,
    generate_synthetic,
)
from ebret.encoder import PooledParams, init_pooled, score_tokens
from ebret.energy import (
    EnergyMode,
    energy,
    enumerate_unnorm_logps,
    exact_log_partition,
    exact_prob,
    serialize_subset,
    unnorm_logp,
)
from ebret.errors import ModeError, ScaleError
from ebret.proposal import piece_probs, subset_logprob


@pytest.fixture(scope="module")
def fixture():
    cfg = SyntheticConfig(num_sessions=6, entities=3, slots=2,
                          turns_per_session=3, correlation_strength=0.5, seed=11)
    corpus = generate_synthetic(cfg)
    vocab = build_vocab(corpus)
    views = encode_corpus(corpus, vocab)
    view = next(v for v in views if v.gold.bits != 0)
    return vocab, view


def zero_params(vocab_size, bias=0.0):
    return PooledParams(
        emb=np.zeros((vocab_size, 4)), w1=np.zeros((4, 4)), b1=np.zeros(4),
        w2=np.zeros(4), b2=bias,
    )


class TestEnergyFunction:
    def test_zero_head_gives_constant_minus_bias(self, fixture):
        vocab, view = fixture
        params = zero_params(len(vocab), bias=1.7)
        for m in (SubsetMask(0, 6), SubsetMask(5, 6), SubsetMask(63, 6)):
            assert energy(view.context, view.user, m, view.piece_tokens,
                          params) == pytest.approx(-1.7)

    def test_empty_mask_finite(self, fixture):
        vocab, view = fixture
        params = init_pooled(len(vocab), 8, 8, np.random.default_rng(0))
        u = energy(view.context, view.user, SubsetMask(0, 6),
                   view.piece_tokens, params)
        assert math.isfinite(u)

    def test_token_permutation_invariance(self, fixture):
        vocab, view = fixture
        params = init_pooled(len(vocab), 8, 8, np.random.default_rng(0))
        mask = SubsetMask(3, 6)
        tokens = (list(view.context) + [SEP] + list(view.user) + [SEP]
                  + serialize_subset(mask, view.piece_tokens))
        shuffled = list(tokens)
        np.random.default_rng(5).shuffle(shuffled)
        assert score_tokens(params, tokens) == pytest.approx(
            score_tokens(params, shuffled), rel=1e-12)

    def test_serialization_order_and_seps(self, fixture):
        vocab, view = fixture
        mask = SubsetMask.from_indices([1, 4], 6)
        toks = serialize_subset(mask, view.piece_tokens)
        a, b = view.piece_tokens[1], view.piece_tokens[4]
        assert toks == list(a) + [SEP] + list(b)

    def test_hand_computed_two_piece_fixture(self):
        # independent straight-line recomputation of the scorer formula
        vocab_size = 10
        rng = np.random.default_rng(42)
        params = init_pooled(vocab_size, 3, 2, rng)
        piece_tokens = [(5, SEP, 6, SEP, 7), (8, SEP, 6, SEP, 9)]
        context, user = [5, 9], [8]
        mask = SubsetMask.from_indices([0, 1], 2)
        x = [0.0, 0.0, 0.0]
        tokens = (list(context) + [SEP] + list(user) + [SEP]
                  + list(piece_tokens[0]) + [SEP] + list(piece_tokens[1]))
        for t in tokens:
            for j in range(3):
                x[j] += params.emb[t][j]
        h = [math.tanh(sum(params.w1[i][j] * x[j] for j in range(3))
                       + params.b1[i]) for i in range(2)]
        expected = -(sum(params.w2[i] * h[i] for i in range(2)) + params.b2)
        got = energy(context, user, mask, piece_tokens, params)
        assert got == pytest.approx(expected, rel=1e-12)


class TestUnnormLogp:
    def test_residual_with_zero_energy_head_is_reference(self, fixture):
        vocab, view = fixture
        rng = np.random.default_rng(1)
        ref = init_pooled(len(vocab), 8, 8, rng)
        params = zero_params(len(vocab), bias=0.0)
        mode = EnergyMode.residual(ref)
        probs = piece_probs(view.context, view.user, view.piece_tokens, ref)
        for m in all_masks(6):
            got = unnorm_logp(view.context, view.user, m, view.piece_tokens,
                              params, mode)
            assert got == pytest.approx(subset_logprob(m, probs), rel=1e-12)

    def test_nonresidual_constant_energy_uniform(self, fixture):
        vocab, view = fixture
        params = zero_params(len(vocab), bias=2.0)
        mode = EnergyMode.nonresidual()
        for m in (SubsetMask(0, 6), SubsetMask(17, 6)):
            p = exact_prob(m, view.context, view.user, view.piece_tokens,
                           params, mode)
            assert p == pytest.approx(2.0 ** -6, abs=1e-12)

    def test_residual_requires_reference(self):
        with pytest.raises(ModeError):
            EnergyMode("residual")
        with pytest.raises(ModeError):
            EnergyMode("bogus")

    def test_residual_without_kb_errors(self, fixture):
        vocab, view = fixture
        ref = init_pooled(len(vocab), 8, 8, np.random.default_rng(1))
        params = zero_params(len(vocab))
        mode = EnergyMode.residual(ref)
        with pytest.raises(ModeError):
            unnorm_logp(view.context, view.user, SubsetMask(0, 0), [], params,
                        mode)


class TestExactPartition:
    def test_zero_energy_nonresidual_is_n_log_two(self, fixture):
        vocab, view = fixture
        params = zero_params(len(vocab), bias=0.0)
        got = exact_log_partition(view.context, view.user, view.piece_tokens,
                                  params, EnergyMode.nonresidual())
        assert got == pytest.approx(6 * math.log(2.0), rel=1e-12)

    def test_zero_energy_residual_is_zero(self, fixture):
        vocab, view = fixture
        ref = init_pooled(len(vocab), 8, 8, np.random.default_rng(1))
        params = zero_params(len(vocab), bias=0.0)
        got = exact_log_partition(view.context, view.user, view.piece_tokens,
                                  params, EnergyMode.residual(ref))
        assert got == pytest.approx(0.0, abs=1e-9)

    def test_probabilities_sum_to_one_random_params(self, fixture):
        vocab, view = fixture
        rng = np.random.default_rng(2)
        for kind in ("nonresidual", "residual"):
            params = init_pooled(len(vocab), 8, 8, rng)
            ref = init_pooled(len(vocab), 8, 8, rng)
            mode = (EnergyMode.nonresidual() if kind == "nonresidual"
                    else EnergyMode.residual(ref))
            total = sum(
                exact_prob(m, view.context, view.user, view.piece_tokens,
                           params, mode)
                for m in all_masks(6)
            )
            assert total == pytest.approx(1.0, abs=1e-9)

    def test_scale_cap(self, fixture):
        vocab, view = fixture
        params = zero_params(len(vocab))
        with pytest.raises(ScaleError):
            enumerate_unnorm_logps([], [], [()] * 17, params,
                                   EnergyMode.nonresidual())


class TestExactProb:
    def test_energy_shift_leaves_probs_unchanged(self, fixture):
        vocab, view = fixture
        rng = np.random.default_rng(3)
        params = init_pooled(len(vocab), 8, 8, rng)
        shifted = params.copy()
        shifted.b2 += 4.2
        mode = EnergyMode.nonresidual()
        for m in (SubsetMask(0, 6), SubsetMask(9, 6), SubsetMask(63, 6)):
            a = exact_prob(m, view.context, view.user, view.piece_tokens,
                           params, mode)
            b = exact_prob(m, view.context, view.user, view.piece_tokens,
                           shifted, mode)
            assert a == pytest.approx(b, rel=1e-9)

    def test_single_piece_two_thirds_fixture(self):
        # tanh saturates exactly to 1.0 for large inputs, so the two energies
        # are exactly 0 and ln 2: p(empty) = 1/(1+1/2) = 2/3
        vocab_size = 8
        params = PooledParams(
            emb=np.zeros((vocab_size, 1)), w1=np.ones((1, 1)),
            b1=np.zeros(1), w2=np.array([-math.log(2.0)]), b2=0.0,
        )
        params.emb[5, 0] = 40.0  # piece tokens pool far into saturation
        piece_tokens = [(5, SEP, 5, SEP, 5)]
        mode = EnergyMode.nonresidual()
        empty, full = SubsetMask(0, 1), SubsetMask(1, 1)
        assert energy([], [], empty, piece_tokens, params) == 0.0
        assert energy([], [], full, piece_tokens, params) == pytest.approx(
            math.log(2.0), rel=1e-15)
        assert exact_prob(empty, [], [], piece_tokens, params, mode) == (
            pytest.approx(2.0 / 3.0, rel=1e-12))
        assert exact_prob(full, [], [], piece_tokens, params, mode) == (
            pytest.approx(1.0 / 3.0, rel=1e-12))

    def test_batched_matches_single_path(self, fixture):
        vocab, view = fixture
        rng = np.random.default_rng(4)
        params = init_pooled(len(vocab), 8, 8, rng)
        ref = init_pooled(len(vocab), 8, 8, rng)
        for mode in (EnergyMode.nonresidual(), EnergyMode.residual(ref)):
            lps = enumerate_unnorm_logps(view.context, view.user,
                                         view.piece_tokens, params, mode)
            for m in (SubsetMask(0, 6), SubsetMask(21, 6), SubsetMask(63, 6)):
                single = unnorm_logp(view.context, view.user, m,
                                     view.piece_tokens, params, mode)
                assert single == pytest.approx(lps[m.bits], rel=1e-9)

    def test_serialization_determinism(self, fixture):
        vocab, view = fixture
        params = init_pooled(len(vocab), 8, 8, np.random.default_rng(5))
        mask = SubsetMask(11, 6)
        a = energy(view.context, view.user, mask, view.piece_tokens, params)
        b = energy(view.context, view.user, mask, view.piece_tokens, params)
        assert a == b
