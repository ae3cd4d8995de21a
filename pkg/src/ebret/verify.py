"""Built-in verification suites: enumeration oracles, gradient checks, and
sampler convergence. These run on fixed internal fixtures with reduced
budgets; the full-strength versions live in the test suite.
"""

from __future__ import annotations

import numpy as np

from .candidates import exhaustive_top_k, top_k_subsets
from .corpus import SubsetMask, SyntheticConfig, build_vocab, encode_corpus, generate_synthetic
from .energy import EnergyMode, enumerate_unnorm_logps
from .encoder import init_pooled
from .proposal import SGDConfig, piece_probs, train_proposal
from .trainer import finite_diff_check, is_grad_estimate, mis_grad_estimate, mle_grad_exact


def _fixture_views(n_sessions=6, seed=11):
    cfg = SyntheticConfig(num_sessions=n_sessions, entities=3, slots=2,
                          turns_per_session=3, correlation_strength=0.5, seed=seed)
    corpus = generate_synthetic(cfg)
    vocab = build_vocab(corpus)
    return encode_corpus(corpus, vocab), vocab


def _report(name: str, ok: bool) -> bool:
    print(f"{'PASS' if ok else 'FAIL'}  {name}")
    return ok


def run_oracles(trials: int = 200, seed: int = 0) -> bool:
    """Beam top-K equals the exhaustive sort; exact probabilities normalize."""
    rng = np.random.default_rng(seed)
    ok = True
    agree = True
    for _ in range(trials):
        n = int(rng.integers(0, 9))
        probs = rng.uniform(0.01, 0.99, size=n)
        k = int(rng.integers(1, 2 ** max(n, 1) + 1))
        a = top_k_subsets(probs, k)
        b = exhaustive_top_k(probs, k)
        if [c.mask for c in a] != [c.mask for c in b]:
            agree = False
            break
    ok &= _report("top-k beam equals exhaustive oracle", agree)

    views, vocab = _fixture_views()
    view = next(v for v in views if v.n_pieces > 0)
    rng = np.random.default_rng(1)
    normalized = True
    for kind in ("nonresidual", "residual"):
        params = init_pooled(len(vocab), 8, 8, rng)
        ref = init_pooled(len(vocab), 8, 8, rng)
        mode = EnergyMode.nonresidual() if kind == "nonresidual" else EnergyMode.residual(ref)
        lps = enumerate_unnorm_logps(view.context, view.user, view.piece_tokens,
                                     params, mode)
        total = np.exp(lps - lps.max()).sum()
        p = np.exp(lps - lps.max()) / total
        normalized &= abs(p.sum() - 1.0) < 1e-9
    ok &= _report("exact probabilities sum to one (both modes)", normalized)
    return ok


def run_gradients(configs: int = 5, seed: int = 0) -> bool:
    """Analytic exact gradient vs central finite differences."""
    views, vocab = _fixture_views(n_sessions=3)
    small = [v for v in views if v.n_pieces <= 8][:configs]
    rng = np.random.default_rng(seed)
    ok = True
    worst = 0.0
    for i, view in enumerate(small):
        params = init_pooled(len(vocab), 4, 4, rng)
        ref = init_pooled(len(vocab), 4, 4, rng)
        mode = EnergyMode.residual(ref) if i % 2 else EnergyMode.nonresidual()
        worst = max(worst, finite_diff_check(params, view, mode, epsilon=1e-4))
    ok &= _report(f"finite differences agree (max rel err {worst:.2e})", worst < 1e-4)
    return ok


def run_samplers(budget: int = 20000, seed: int = 0) -> bool:
    """IS/MIS expectation terms approach the exact one; MIS visits match the
    exact distribution in total variation."""
    views, vocab = _fixture_views()
    view = next(v for v in views if v.gold is not None and v.n_pieces == 6)
    rng = np.random.default_rng(seed)
    params = init_pooled(len(vocab), 8, 8, rng)
    ref = init_pooled(len(vocab), 8, 8, rng)
    mode = EnergyMode.residual(ref)
    probs = piece_probs(view.context, view.user, view.piece_tokens, ref)
    exact = mle_grad_exact(view, params, mode, probs).expectation_term

    def rel(est):
        return float(np.linalg.norm(est - exact) / max(np.linalg.norm(exact), 1e-12))

    errs_is, errs_mis = [], []
    for s in range(4):
        r1 = np.random.default_rng([seed, 1, s])
        r2 = np.random.default_rng([seed, 2, s])
        errs_is.append(rel(is_grad_estimate(view, params, mode, budget, r1,
                                            probs).expectation_term))
        errs_mis.append(rel(mis_grad_estimate(view, params, mode, budget, r2,
                                              probs).expectation_term))
    ok = _report(f"IS expectation within 10% of exact (err {np.mean(errs_is):.3f})",
                 float(np.mean(errs_is)) < 0.10)
    ok &= _report(f"MIS expectation within 10% of exact (err {np.mean(errs_mis):.3f})",
                  float(np.mean(errs_mis)) < 0.10)

    # stationarity: chain visit frequencies vs exact probabilities
    lps = enumerate_unnorm_logps(view.context, view.user, view.piece_tokens,
                                 params, mode, probs)
    p_exact = np.exp(lps - lps.max())
    p_exact /= p_exact.sum()
    draws = (np.random.default_rng([seed, 3]).random((budget + 1, 6)) < probs).astype(np.int64)
    etas = np.random.default_rng([seed, 4]).random(budget)
    packed = draws @ (1 << np.arange(6))
    from .proposal import masks_logprob
    from .trainer import mis_accept

    bit_all = (np.arange(64)[:, None] >> np.arange(6)) & 1
    logw = lps - masks_logprob(bit_all, probs)
    cur = int(packed[0])
    visits = np.zeros(64)
    for t in range(budget):
        cand = int(packed[t + 1])
        if mis_accept(float(logw[cand]), float(logw[cur]), float(etas[t])):
            cur = cand
        visits[cur] += 1
    tv = 0.5 * np.abs(visits / budget - p_exact).sum()
    ok &= _report(f"MIS chain stationary (TV {tv:.4f})", tv < 0.05)
    return ok


SUITES = {
    "oracles": run_oracles,
    "gradients": run_gradients,
    "samplers": run_samplers,
}
