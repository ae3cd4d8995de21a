"""Toy autoregressive generator and response-aware inference model."""

import math

import numpy as np
import pytest

from ebret.corpus import (
    BOS,
    EOS,
    SubsetMask,
    SyntheticConfig,
    build_vocab,
    encode_corpus,
    generate_synthetic,
    strip_labels,
)
from ebret.encoder import init_pooled
from ebret.errors import DataError
from ebret.generation import (
    GenParams,
    gen_greedy,
    gen_logprob,
    gen_nll_grad,
    gen_sample,
    gen_step_logprobs,
    inf_piece_probs,
    inf_propose,
    init_gen,
    train_gen,
    train_inf,
)
from ebret.proposal import SGDConfig, subset_logprob


@pytest.fixture(scope="module")
def fixture():
    cfg = SyntheticConfig(num_sessions=8, entities=3, slots=2,
                          turns_per_session=3, correlation_strength=0.5, seed=11)
    corpus = generate_synthetic(cfg)
    vocab = build_vocab(corpus)
    views = encode_corpus(corpus, vocab)
    view = next(v for v in views if v.gold.bits != 0)
    return vocab, views, view


def zero_gen(vocab_size, d=3, h=3):
    return GenParams(
        emb=np.zeros((vocab_size, d)), cproj=np.zeros((h, d)),
        pproj=np.zeros((h, d)), out=np.zeros((vocab_size, h)),
        bias=np.zeros(vocab_size),
    )


class TestGenLogprob:
    def test_zero_weights_uniform(self, fixture):
        vocab, _, view = fixture
        params = zero_gen(len(vocab))
        lp = gen_logprob(view.response, view.context, view.user, view.gold,
                         view.piece_tokens, params)
        assert lp == pytest.approx(len(view.response) * math.log(1 / len(vocab)))

    def test_steps_sum_to_total(self, fixture):
        vocab, _, view = fixture
        params = init_gen(len(vocab), 6, 6, np.random.default_rng(0))
        steps = gen_step_logprobs(view.response, view.context, view.user,
                                  view.gold, view.piece_tokens, params)
        total = gen_logprob(view.response, view.context, view.user, view.gold,
                            view.piece_tokens, params)
        assert total == pytest.approx(float(steps.sum()), rel=1e-12)

    def test_per_step_softmax_normalizes(self, fixture):
        vocab, _, view = fixture
        params = init_gen(len(vocab), 6, 6, np.random.default_rng(1))
        # first-step probability over every possible token sums to one
        total = 0.0
        for tok in range(len(vocab)):
            if tok == EOS:
                lp = gen_step_logprobs([EOS], view.context, view.user,
                                       view.gold, view.piece_tokens, params)
            else:
                lp = gen_step_logprobs([tok, EOS], view.context, view.user,
                                       view.gold, view.piece_tokens, params)
            total += math.exp(float(lp[0]))
        assert total == pytest.approx(1.0, abs=1e-12)

    def test_requires_eos(self, fixture):
        vocab, _, view = fixture
        params = zero_gen(len(vocab))
        with pytest.raises(DataError):
            gen_logprob([5, 6], view.context, view.user, view.gold,
                        view.piece_tokens, params)

    def test_hand_computed_two_step_fixture(self):
        # independent recomputation with explicit loops on a 4-token vocab
        v, d, h = 6, 2, 2
        rng = np.random.default_rng(7)
        params = init_gen(v, d, h, rng)
        context, user = [5], [4]
        piece_tokens = [(5, 1, 4, 1, 5)]
        mask = SubsetMask(1, 1)
        response = [4, EOS]
        cond = [0.0, 0.0]
        for t in list(context) + list(user) + list(piece_tokens[0]):
            for j in range(d):
                cond[j] += params.emb[t][j]
        expected = 0.0
        prev = BOS
        for target in response:
            a = [sum(params.cproj[i][j] * cond[j] for j in range(d))
                 + sum(params.pproj[i][j] * params.emb[prev][j] for j in range(d))
                 for i in range(h)]
            hh = [math.tanh(x) for x in a]
            logits = [sum(params.out[w][i] * hh[i] for i in range(h))
                      + params.bias[w] for w in range(v)]
            z = sum(math.exp(x) for x in logits)
            expected += logits[target] - math.log(z)
            prev = target
        got = gen_logprob(response, context, user, mask, piece_tokens, params)
        assert got == pytest.approx(expected, rel=1e-12)


class TestGenSampling:
    def test_zero_weights_unigram_uniform(self, fixture):
        vocab, _, view = fixture
        params = zero_gen(len(vocab))
        rng = np.random.default_rng(0)
        counts = np.zeros(len(vocab))
        n = 100_000
        for _ in range(n):
            tok = gen_sample(view.context, view.user, view.gold,
                             view.piece_tokens, params, rng, max_len=1)[0]
            counts[tok] += 1
        assert np.all(np.abs(counts / n - 1.0 / len(vocab)) < 0.01)

    def test_seeded_determinism(self, fixture):
        vocab, _, view = fixture
        params = init_gen(len(vocab), 6, 6, np.random.default_rng(2))
        a = gen_sample(view.context, view.user, view.gold, view.piece_tokens,
                       params, np.random.default_rng(5), 12)
        b = gen_sample(view.context, view.user, view.gold, view.piece_tokens,
                       params, np.random.default_rng(5), 12)
        assert a == b

    def test_max_len_respected(self, fixture):
        vocab, _, view = fixture
        params = init_gen(len(vocab), 6, 6, np.random.default_rng(2))
        out = gen_sample(view.context, view.user, view.gold, view.piece_tokens,
                         params, np.random.default_rng(1), max_len=1)
        assert len(out) == 1

    def test_greedy_is_deterministic(self, fixture):
        vocab, _, view = fixture
        params = init_gen(len(vocab), 6, 6, np.random.default_rng(2))
        a = gen_greedy(view.context, view.user, view.gold, view.piece_tokens,
                       params, 12)
        assert a == gen_greedy(view.context, view.user, view.gold,
                               view.piece_tokens, params, 12)


class TestGenGradient:
    def test_matches_finite_differences(self, fixture):
        vocab, _, view = fixture
        params = init_gen(len(vocab), 4, 4, np.random.default_rng(3))
        nll, grad = gen_nll_grad(view.response, view.context, view.user,
                                 view.gold, view.piece_tokens, params)
        vec = params.flatten()
        eps = 1e-5
        rng = np.random.default_rng(0)
        worst = 0.0
        for i in rng.choice(len(vec), size=150, replace=False):
            orig = vec[i]
            vec[i] = orig + eps
            hi = -gen_logprob(view.response, view.context, view.user,
                              view.gold, view.piece_tokens,
                              params.unflatten(vec))
            vec[i] = orig - eps
            lo = -gen_logprob(view.response, view.context, view.user,
                              view.gold, view.piece_tokens,
                              params.unflatten(vec))
            vec[i] = orig
            numeric = (hi - lo) / (2 * eps)
            if abs(numeric) < 1e-12 and abs(grad[i]) < 1e-12:
                continue
            worst = max(worst, abs(grad[i] - numeric)
                        / max(abs(grad[i]), abs(numeric), 1e-6))
        assert worst < 1e-4


class TestInferenceModel:
    def test_zero_weights_sigmoid_bias(self, fixture):
        vocab, _, view = fixture
        params = init_pooled(len(vocab), 4, 4, np.random.default_rng(0))
        params.emb[:] = 0.0
        params.w1[:] = 0.0
        params.w2[:] = 0.0
        params.b1[:] = 0.0
        params.b2 = -0.4
        probs = inf_piece_probs(view.context, view.user, view.response,
                                view.piece_tokens, params)
        want = 1.0 / (1.0 + math.exp(0.4))
        assert np.allclose(probs, want)

    def test_logq_is_subset_logprob(self, fixture):
        vocab, _, view = fixture
        params = init_pooled(len(vocab), 6, 6, np.random.default_rng(4))
        mask, logq = inf_propose(view.context, view.user, view.response,
                                 view.piece_tokens, params,
                                 np.random.default_rng(0))
        probs = inf_piece_probs(view.context, view.user, view.response,
                                view.piece_tokens, params)
        assert logq == subset_logprob(mask, probs)

    def test_proposal_self_consistency_bit_exact(self, fixture):
        vocab, _, view = fixture
        params = init_pooled(len(vocab), 6, 6, np.random.default_rng(4))
        for seed in range(5):
            mask, logq = inf_propose(view.context, view.user, view.response,
                                     view.piece_tokens, params,
                                     np.random.default_rng(seed))
            probs = inf_piece_probs(view.context, view.user, view.response,
                                    view.piece_tokens, params)
            assert subset_logprob(mask, probs) == logq


class TestSupervisedTraining:
    def test_lr_zero_keeps_init(self, fixture):
        vocab, views, _ = fixture
        cfg = SGDConfig(lr=0.0, epochs=2, seed=21, d_emb=6, hidden=6)
        got = train_gen(views[:4], len(vocab), cfg)
        want = init_gen(len(vocab), 6, 6, np.random.default_rng(21))
        assert np.array_equal(got.flatten(), want.flatten())
        got = train_inf(views[:4], len(vocab), cfg)
        want = init_pooled(len(vocab), 6, 6, np.random.default_rng(21))
        assert np.array_equal(got.flatten(), want.flatten())

    def test_unlabeled_rejected(self, fixture):
        vocab, _, _ = fixture
        cfg = SyntheticConfig(num_sessions=2, entities=2, slots=2,
                              turns_per_session=2, seed=0)
        corpus = strip_labels(generate_synthetic(cfg))
        vb = build_vocab(corpus)
        views = encode_corpus(corpus, vb)
        with pytest.raises(DataError):
            train_gen(views, len(vb), SGDConfig(epochs=1))
        with pytest.raises(DataError):
            train_inf(views, len(vb), SGDConfig(epochs=1))

    @pytest.mark.slow
    def test_gen_beats_unigram_baseline(self):
        cfg = SyntheticConfig(num_sessions=40, entities=3, slots=4,
                              turns_per_session=3, correlation_strength=0.5,
                              seed=2)
        corpus = generate_synthetic(cfg)
        vocab = build_vocab(corpus)
        views = encode_corpus(corpus, vocab)
        params = train_gen(views, len(vocab),
                           SGDConfig(lr=0.3, lr_decay=0.01, epochs=300, seed=0))
        # unigram entropy of the response corpus, in nats/token
        from collections import Counter

        counts = Counter(t for v in views for t in v.response)
        total = sum(counts.values())
        unigram = -sum(c / total * math.log(c / total)
                       for c in counts.values())
        nll = -np.mean([
            gen_logprob(v.response, v.context, v.user, v.gold,
                        v.piece_tokens, params) / len(v.response)
            for v in views
        ])
        assert nll < unigram

    @pytest.mark.slow
    def test_inference_beats_proposal_on_ambiguous_corpus(self):
        # the response names the entity, so the response-aware model can
        # disambiguate turns the context-only model cannot
        from ebret.metrics import joint_acc
        from ebret.proposal import piece_probs, threshold_decode, train_proposal

        cfg = SyntheticConfig(num_sessions=120, entities=3, slots=4,
                              turns_per_session=3, correlation_strength=0.7,
                              seed=5)
        corpus = generate_synthetic(cfg)
        vocab = build_vocab(corpus)
        train, test = corpus[:90], corpus[90:]
        tv = encode_corpus(train, vocab)
        ev = encode_corpus(test, vocab)
        pp = train_proposal(tv, len(vocab), SGDConfig(seed=0))
        ip = train_inf(tv, len(vocab), SGDConfig(seed=0))
        gold = [v.gold for v in ev]
        prop = [threshold_decode(
            piece_probs(v.context, v.user, v.piece_tokens, pp), 0.5)
            for v in ev]
        inf = [threshold_decode(
            inf_piece_probs(v.context, v.user, v.response, v.piece_tokens, ip),
            0.5) for v in ev]
        assert joint_acc(inf, gold) >= joint_acc(prop, gold)
