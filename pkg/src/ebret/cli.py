"""Command-line pipeline: data generation, training, retrieval, evaluation.

Exit codes: 0 ok, 2 config, 3 data, 4 scale, 5 estimator. Config files are
flat `key = value` text; any matching command-line flag overrides its config
key. All artifacts land under the paths given; nothing else is touched.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace

import numpy as np

from . import checkpoint as ckpt
from .corpus import (
    Session,
    SubsetMask,
    SyntheticConfig,
    Vocab,
    build_vocab,
    encode_corpus,
    encode_session,
    generate_synthetic,
    load_jsonl,
    save_jsonl,
    strip_labels,
)
from .energy import NONRESIDUAL, RESIDUAL, EnergyMode
from .errors import (
    ConfigError,
    DataError,
    EbretError,
    EstimatorError,
    ScaleError,
)
from .generation import gen_greedy, gen_logprob, inf_piece_probs
from .jsa import JSA, PL, FrozenModels, SemiConfig, jsa_train
from .metrics import bleu4, combined, inform, joint_acc, prf1, success
from .proposal import (
    SGDConfig,
    piece_probs,
    subset_logprob,
    threshold_decode,
    train_proposal,
)
from .rescoring import rescore_retrieve
from .trainer import TrainerConfig, train_energy
from .verify import SUITES

EXIT_CONFIG, EXIT_DATA, EXIT_SCALE, EXIT_ESTIMATOR = 2, 3, 4, 5


def _read_config_file(path: str) -> dict[str, str]:
    out: dict[str, str] = {}
    try:
        with open(path, encoding="utf-8") as f:
            for lineno, raw in enumerate(f, start=1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected key = value")
                key, value = line.split("=", 1)
                out[key.strip()] = value.strip()
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from None
    return out


def _merge_config(args: argparse.Namespace, keys: dict[str, type]) -> dict:
    """Config-file values, overridden by any explicitly passed flag."""
    merged: dict = {}
    file_cfg = _read_config_file(args.config) if getattr(args, "config", None) else {}
    for key, kind in keys.items():
        if key in file_cfg:
            raw = file_cfg[key]
            try:
                merged[key] = (raw.lower() in ("1", "true", "yes")) if kind is bool else kind(raw)
            except ValueError:
                raise ConfigError(f"config key {key!r}: cannot parse {raw!r}") from None
        flag = getattr(args, key, None)
        if flag is not None:
            merged[key] = flag
    unknown = set(file_cfg) - set(keys) - {"workers"}
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if "workers" in file_cfg and int(file_cfg["workers"]) < 1:
        raise ConfigError("workers must be >= 1")
    return merged


def _load_vocab(path: str) -> Vocab:
    try:
        return Vocab.load(path)
    except OSError as e:
        raise DataError(f"cannot read vocabulary {path}: {e}") from None


def _sgd_config(args) -> SGDConfig:
    cfg = SGDConfig()
    for key in ("lr", "epochs", "batch", "seed", "d_emb", "hidden"):
        v = getattr(args, key, None)
        if v is not None:
            cfg = replace(cfg, **{key: v})
    return cfg


# ---------------------------------------------------------------------------
# Subcommands


def _cmd_gen_data(args) -> int:
    keys = {"num_sessions": int, "entities": int, "slots": int,
            "turns_per_session": int, "vocab_size": int,
            "correlation_strength": float, "seed": int}
    merged = _merge_config(args, keys)
    missing = [k for k in ("num_sessions", "entities", "slots", "turns_per_session")
               if k not in merged]
    if missing:
        raise ConfigError(f"missing config keys: {missing}")
    cfg = SyntheticConfig(**merged)
    corpus = generate_synthetic(cfg)
    if args.unlabeled:
        corpus = strip_labels(corpus)
    save_jsonl(corpus, args.out)
    build_vocab(corpus).save(args.out + ".vocab")
    print(f"wrote {len(corpus)} sessions to {args.out}")
    return 0


def _cmd_train_proposal(args) -> int:
    corpus = load_jsonl(args.data)
    vocab = _load_vocab(args.vocab)
    views = encode_corpus(corpus, vocab)
    params = train_proposal(views, len(vocab), _sgd_config(args),
                            log_path=args.log)
    ckpt.save_proposal(args.out, params)
    print(f"wrote proposal checkpoint {args.out}")
    return 0


def _cmd_train_gen(args) -> int:
    from .generation import train_gen

    corpus = load_jsonl(args.data)
    vocab = _load_vocab(args.vocab)
    views = encode_corpus(corpus, vocab)
    params = train_gen(views, len(vocab), _sgd_config(args), log_path=args.log)
    ckpt.save_gen(args.out, params)
    print(f"wrote generator checkpoint {args.out}")
    return 0


def _cmd_train_inf(args) -> int:
    from .generation import train_inf

    corpus = load_jsonl(args.data)
    vocab = _load_vocab(args.vocab)
    views = encode_corpus(corpus, vocab)
    params = train_inf(views, len(vocab), _sgd_config(args), log_path=args.log)
    ckpt.save_inf(args.out, params)
    print(f"wrote inference checkpoint {args.out}")
    return 0


def _cmd_train_energy(args) -> int:
    corpus = load_jsonl(args.data)
    vocab = _load_vocab(args.vocab)
    views = encode_corpus(corpus, vocab)
    proposal = ckpt.load_proposal(args.proposal)
    cfg = TrainerConfig(estimator=args.estimator, mode=args.mode,
                        sample_size=args.samples, chain_steps=args.samples)
    for key in ("lr", "epochs", "batch", "seed", "d_emb", "hidden"):
        v = getattr(args, key, None)
        if v is not None:
            cfg = replace(cfg, **{key: v})
    params = train_energy(views, proposal, cfg, log_path=args.log)
    ref_hash = ckpt.file_sha256(args.proposal) if args.mode == RESIDUAL else None
    ckpt.save_energy(args.out, params, args.mode, ref_hash)
    print(f"wrote energy checkpoint {args.out}")
    return 0


def _energy_mode(args, proposal, energy_kind, ref_hash) -> EnergyMode:
    if energy_kind == NONRESIDUAL:
        return EnergyMode.nonresidual()
    actual = ckpt.file_sha256(args.proposal)
    if ref_hash is not None and ref_hash != actual:
        raise ConfigError(
            "residual energy checkpoint was trained against a different "
            "proposal checkpoint (reference hash mismatch)"
        )
    return EnergyMode.residual(proposal)


def _cmd_retrieve(args) -> int:
    corpus = load_jsonl(args.data)
    vocab = _load_vocab(args.vocab)
    proposal = ckpt.load_proposal(args.proposal)
    energy_params = energy_mode = None
    if args.energy:
        energy_params, kind, ref_hash = ckpt.load_energy(args.energy)
        energy_mode = _energy_mode(args, proposal, kind, ref_hash)
    rows = []
    for session in corpus:
        if session.kb is None:
            raise DataError(f"session {session.session_id} has no KB to retrieve from")
        for view in encode_session(session, vocab):
            if energy_params is None:
                probs = piece_probs(view.context, view.user, view.piece_tokens,
                                    proposal)
                mask = threshold_decode(probs, args.tau)
            else:
                mask, _ = rescore_retrieve(view.context, view.user,
                                           view.piece_tokens, proposal,
                                           energy_params, energy_mode, args.k)
            rows.append({
                "session_id": view.session_id,
                "turn_index": view.turn_index,
                "pred": session.kb.ids_from_mask(mask),
            })
    with open(args.out, "w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True) + "\n")
    print(f"wrote {len(rows)} predictions to {args.out}")
    return 0


def _cmd_train_jsa(args) -> int:
    import os

    labeled = load_jsonl(args.labeled)
    unlabeled = load_jsonl(args.unlabeled)
    vocab = _load_vocab(args.vocab)
    proposal = ckpt.load_proposal(args.proposal)
    gen_params = ckpt.load_gen(args.gen)
    inf_params = ckpt.load_inf(args.inf)
    energy_params, energy_kind = None, NONRESIDUAL
    if args.energy:
        energy_params, energy_kind, _ = ckpt.load_energy(args.energy)
    if ":" not in args.ratio:
        raise ConfigError("ratio must look like R:1")
    num, den = args.ratio.split(":", 1)
    try:
        ratio = float(num) / float(den)
    except (ValueError, ZeroDivisionError):
        raise ConfigError(f"cannot parse ratio {args.ratio!r}") from None
    cfg = SemiConfig(method=args.method, weight_source=args.weights,
                     unlabeled_ratio=ratio, lr=args.lr, epochs=args.epochs,
                     seed=args.seed, hide_unlabeled_kb=args.hide_kb)
    models = FrozenModels(proposal=proposal, gen=gen_params, inf=inf_params,
                          energy=energy_params, energy_kind=energy_kind)
    labeled_views = [encode_session(s, vocab) for s in labeled]
    unlabeled_views = [encode_session(s, vocab) for s in unlabeled]
    os.makedirs(args.out, exist_ok=True)
    gen_out, inf_out, _ = jsa_train(labeled_views, unlabeled_views, models, cfg,
                                    log_path=os.path.join(args.out, "history.jsonl"))
    ckpt.save_gen(os.path.join(args.out, "gen.ckpt"), gen_out)
    ckpt.save_inf(os.path.join(args.out, "inf.ckpt"), inf_out)
    print(f"wrote stage-two checkpoints to {args.out}")
    return 0


def _load_preds(path: str, corpus: list[Session]) -> list[SubsetMask]:
    by_key = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            row = json.loads(line)
            by_key[(row["session_id"], row["turn_index"])] = row["pred"]
    preds = []
    for session in corpus:
        for t in range(len(session.turns)):
            key = (session.session_id, t)
            if key not in by_key:
                raise DataError(f"missing prediction for {key}")
            preds.append(session.kb.mask_from_ids(by_key[key]))
    return preds


def _print_report(report: dict, out: str | None) -> None:
    text = json.dumps(report, sort_keys=True, indent=2)
    print(text)
    if out:
        with open(out, "w", encoding="utf-8") as f:
            f.write(text + "\n")


def _cmd_eval_retrieval(args) -> int:
    corpus = load_jsonl(args.data)
    for session in corpus:
        if not session.labeled:
            raise DataError(f"session {session.session_id} is unlabeled")
    preds = _load_preds(args.preds, corpus)
    gold = [t.gold for s in corpus for t in s.turns]
    sizes = [len(s.turns) for s in corpus]
    precision, recall, f1 = prf1(preds, gold)
    report = {
        "joint_acc": joint_acc(preds, gold),
        "inform": inform(preds, gold, sizes),
        "precision": precision,
        "recall": recall,
        "f1": f1,
    }
    _print_report(report, args.out)
    return 0


def _cmd_eval_e2e(args) -> int:
    corpus = load_jsonl(args.data)
    vocab = _load_vocab(args.vocab)
    gen_params = ckpt.load_gen(args.gen)
    inf_params = ckpt.load_inf(args.inf)
    hyps, refs = [], []
    per_session_words, per_session_requested = [], []
    gen_nll, gen_tokens = 0.0, 0
    inf_nll, inf_pieces = 0.0, 0
    for session in corpus:
        if not session.labeled:
            raise DataError(f"session {session.session_id} is unlabeled")
        session_words = []
        requested = set()
        for view in encode_session(session, vocab):
            decoded = gen_greedy(view.context, view.user, view.gold,
                                 view.piece_tokens, gen_params,
                                 max_len=args.max_len)
            words = vocab.decode_words(decoded)
            hyps.append(words)
            refs.append(vocab.decode_words(view.response))
            session_words.append(words)
            requested |= set(view.requested)
            gen_nll -= gen_logprob(view.response, view.context, view.user,
                                   view.gold, view.piece_tokens, gen_params)
            gen_tokens += len(view.response)
            probs = inf_piece_probs(view.context, view.user, view.response,
                                    view.piece_tokens, inf_params)
            inf_nll -= subset_logprob(view.gold, probs)
            inf_pieces += view.n_pieces
        per_session_words.append(session_words)
        per_session_requested.append(requested)
    bleu_pct = 100.0 * bleu4(hyps, refs)
    success_pct = 100.0 * success(per_session_words, per_session_requested)
    report = {
        "bleu": bleu_pct,
        "success": success_pct,
        "combined": combined(success_pct, bleu_pct),
        "gen_nll_per_token": gen_nll / max(gen_tokens, 1),
        "inf_nll_per_piece": inf_nll / max(inf_pieces, 1),
    }
    _print_report(report, args.out)
    return 0


def _cmd_verify(args) -> int:
    ok = SUITES[args.suite]()
    return 0 if ok else 1


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ebret",
        description="Energy-based subset retrieval: pipeline commands",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic corpus")
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--out", required=True)
    p.add_argument("--unlabeled", action="store_true",
                   help="strip gold annotations from the generated sessions")
    for key, kind in (("num_sessions", int), ("entities", int), ("slots", int),
                      ("turns_per_session", int), ("vocab_size", int),
                      ("correlation_strength", float), ("seed", int)):
        p.add_argument(f"--{key.replace('_', '-')}", dest=key, type=kind)
    p.set_defaults(func=_cmd_gen_data)

    def add_sgd_flags(p):
        p.add_argument("--data", required=True)
        p.add_argument("--vocab", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--log")
        p.add_argument("--lr", type=float)
        p.add_argument("--epochs", type=int)
        p.add_argument("--batch", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--d-emb", dest="d_emb", type=int)
        p.add_argument("--hidden", type=int)

    for name, fn in (("train-proposal", _cmd_train_proposal),
                     ("train-gen", _cmd_train_gen),
                     ("train-inf", _cmd_train_inf)):
        p = sub.add_parser(name, help=f"supervised training: {name[6:]}")
        add_sgd_flags(p)
        p.set_defaults(func=fn)

    p = sub.add_parser("train-energy", help="train the subset energy scorer")
    add_sgd_flags(p)
    p.add_argument("--proposal", required=True)
    p.add_argument("--estimator", choices=["exact", "is", "mis"], default="is")
    p.add_argument("--mode", choices=[RESIDUAL, NONRESIDUAL], default=RESIDUAL)
    p.add_argument("--samples", type=int, default=12,
                   help="IS sample size / MIS chain steps")
    p.set_defaults(func=_cmd_train_energy)

    p = sub.add_parser("retrieve", help="predict subsets for every turn")
    p.add_argument("--data", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--proposal", required=True)
    p.add_argument("--energy", help="energy checkpoint; omit for pure thresholding")
    p.add_argument("--k", type=int, default=16)
    p.add_argument("--tau", type=float, default=0.5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_retrieve)

    p = sub.add_parser("train-jsa", help="stage-two semi-supervised training")
    p.add_argument("--labeled", required=True)
    p.add_argument("--unlabeled", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--proposal", required=True)
    p.add_argument("--energy")
    p.add_argument("--gen", required=True)
    p.add_argument("--inf", required=True)
    p.add_argument("--method", choices=[PL, JSA], default=JSA)
    p.add_argument("--weights", choices=["traditional", "entriever"],
                   default="entriever")
    p.add_argument("--ratio", default="1:1")
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--hide-kb", action="store_true",
                   help="treat unlabeled KBs as unavailable for weights")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_train_jsa)

    p = sub.add_parser("eval-retrieval", help="score a prediction file")
    p.add_argument("--preds", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_eval_retrieval)

    p = sub.add_parser("eval-e2e", help="generation metrics on labeled data")
    p.add_argument("--gen", required=True)
    p.add_argument("--inf", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--max-len", dest="max_len", type=int, default=24)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_eval_e2e)

    p = sub.add_parser("verify", help="run a built-in verification suite")
    p.add_argument("--suite", choices=sorted(SUITES), required=True)
    p.set_defaults(func=_cmd_verify)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except ScaleError as e:
        print(f"scale error: {e}", file=sys.stderr)
        return EXIT_SCALE
    except EstimatorError as e:
        print(f"estimator error: {e}", file=sys.stderr)
        return EXIT_ESTIMATOR
    except (DataError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except EbretError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
