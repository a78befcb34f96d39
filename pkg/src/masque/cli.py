"""Command-line interface: synth, train, decode, eval, gradcheck, trace."""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import ConfigError, RunConfig, load_config
from .data import (DataError, RawExample, StyleError, SynthSpec,
                   build_vocabulary, encode_example, example_to_record,
                   read_jsonl, synth_corpus, tokenize)
from .evaluation import (EvalPair, RankingJudgment, bleu_1, corpus_rouge_l,
                         decode_report, map_mrr, pr_curve_max_f1,
                         short_answer_copy_rate)
from .model import Masque
from .params import EVAL_CTX, RunCtx
from .training import (TrainingError, atomic_write_text, classification_loss,
                       decoder_loss, load_checkpoint, ranking_loss,
                       save_checkpoint, total_loss, train_run, use_weights,
                       write_metrics_csv)

GRADCHECK_TOL = 1e-4


class _Parser(argparse.ArgumentParser):
    """argparse exits with status 2 on bad flags; we reserve 2 for I/O."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _seed_or_env(value, fallback: int = 0) -> int:
    if value is not None:
        return value
    env = os.environ.get("MASQUE_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"MASQUE_SEED must be an integer, got '{env}'")
    return fallback


def _overrides(pairs) -> dict:
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got '{item}'")
        key, value = item.split("=", 1)
        out[key] = value
    return out


def _load_cfg(args) -> RunConfig:
    overrides = _overrides(getattr(args, "set", None))
    if args.config:
        cfg = load_config(args.config, overrides)
    else:
        cfg = load_config(None, overrides) if overrides else RunConfig()
        cfg.validate()
    seed = getattr(args, "seed", None)
    if seed is not None or os.environ.get("MASQUE_SEED") is not None:
        cfg.seed = _seed_or_env(seed, cfg.seed)
    return cfg


def _write_jsonl_atomic(path, records) -> None:
    text = "".join(json.dumps(r) + "\n" for r in records)
    atomic_write_text(path, text)


def cmd_synth(args) -> int:
    spec = SynthSpec(n=args.n, seed=_seed_or_env(args.seed),
                     k_passages=args.k_passages,
                     unanswerable_frac=args.unanswerable_frac,
                     oov_val_frac=args.oov_val_frac)
    examples = synth_corpus(spec)
    _write_jsonl_atomic(args.out, [example_to_record(e) for e in examples])
    print(f"wrote {len(examples)} examples to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    examples = read_jsonl(args.data)
    model = Masque(cfg, build_vocabulary(examples, cfg.common_size, cfg.styles))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    def progress(row):
        print(f"step {row['step']}/{cfg.total_steps} "
              f"lr {row['lr']:.3e} L {row['L']:.4f}", file=sys.stderr)

    state, rows = train_run(model, examples, mixing=not args.no_mixing,
                            style=args.style, progress=progress)
    write_metrics_csv(out_dir / "metrics.csv", rows)
    save_checkpoint(out_dir / "final", model, state)
    print(f"trained {len(rows)} steps; checkpoint at {out_dir / 'final'}")
    return 0


def cmd_decode(args) -> int:
    model, state = load_checkpoint(args.ckpt)
    examples = read_jsonl(args.data)
    limits = model.cfg.limits()
    weights = {name: p.data for name, p in model.store.items()} \
        if args.live_weights else state.ema
    records = []
    trace_rows = []
    hasher = hashlib.sha256() if args.reader_hash else None
    with use_weights(model.store, weights):
        for ex in examples:
            enc = encode_example(ex, model.vocab, args.style, limits)
            head = model.forward_example(enc, EVAL_CTX, with_decoder=False)
            p_a = head.p_answerable.item()
            if hasher is not None:
                hasher.update(head.reader_out.m_q.data.tobytes())
                hasher.update(head.reader_out.m_p_all.data.tobytes())
            rec = {"query_id": ex.query_id, "style": args.style,
                   "p_answerable": p_a,
                   "beta": [float(b) for b in head.beta.data]}
            if p_a < args.answerable_threshold:
                rec["answer"] = ""
                rec["no_answer"] = True
            else:
                ans = model.greedy(enc, gold_ranker=args.gold_ranker,
                                   collect_trace=args.trace is not None)
                rec["answer"] = " ".join(ans.tokens)
                rec["no_answer"] = False
                if args.trace is not None:
                    trace_rows.append({"query_id": ex.query_id,
                                       "style": args.style,
                                       "answer": rec["answer"],
                                       "steps": ans.trace})
            records.append(rec)
    _write_jsonl_atomic(args.out, records)
    if args.trace is not None:
        _write_jsonl_atomic(args.trace, trace_rows)
    if hasher is not None:
        print(f"reader-hash: {hasher.hexdigest()}")
    print(f"decoded {len(records)} examples to {args.out}")
    return 0


def _answerable(ex: RawExample) -> int:
    return int(any(any(r.strip() for r in refs)
                   for refs in ex.answers.values()))


def cmd_eval(args) -> int:
    preds = []
    with open(args.pred, "r", encoding="utf-8") as fh:
        for i, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                preds.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise DataError(f"{args.pred}:{i}: {e}")
    data = {ex.query_id: ex for ex in read_jsonl(args.data)}
    missing = [p["query_id"] for p in preds if p["query_id"] not in data]
    if missing:
        raise DataError(f"predictions reference unknown query ids: "
                        f"{missing[:3]}")

    scored = []
    copy_pairs = []
    for p in preds:
        ex = data[p["query_id"]]
        refs = tuple(r for r in ex.answers.get(p["style"], ()) if r.strip())
        if refs:
            scored.append(EvalPair(p["query_id"], p.get("answer", ""),
                                   refs, p["style"]))
        all_refs = tuple(r for refs_ in ex.answers.values()
                         for r in refs_ if r.strip())
        if all_refs:
            copy_pairs.append(EvalPair(p["query_id"], p.get("answer", ""),
                                       all_refs, p["style"]))

    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    rows = []
    for metric in metrics:
        if metric == "rouge":
            rows.append((metric, corpus_rouge_l(scored, args.strip_punct)))
        elif metric == "bleu":
            rows.append((metric, bleu_1(scored, args.strip_punct)))
        elif metric in ("map", "mrr"):
            js = [RankingJudgment(p["query_id"], tuple(p["beta"]),
                                  tuple(ps.is_selected for ps in
                                        data[p["query_id"]].passages))
                  for p in preds if "beta" in p]
            if not js:
                raise DataError("ranking metrics need 'beta' in predictions")
            m, r = map_mrr(js)
            rows.append((metric, m if metric == "map" else r))
        elif metric == "f1":
            probs = [p["p_answerable"] for p in preds if "p_answerable" in p]
            if not probs:
                raise DataError("f1 needs 'p_answerable' in predictions")
            labels = [_answerable(data[p["query_id"]]) for p in preds
                      if "p_answerable" in p]
            res = pr_curve_max_f1(probs, labels)
            rows.append(("f1", res.max_f1))
            rows.append(("f1_threshold", res.threshold))
        elif metric == "copy":
            rate = short_answer_copy_rate(copy_pairs)
            rows.append((metric, -1.0 if rate is None else rate))
        else:
            raise ConfigError(f"unknown metric '{metric}'")
    lines = ["metric,value"]
    lines.extend(f"{name},{value!r}" for name, value in rows)
    atomic_write_text(args.out, "\n".join(lines) + "\n")
    for name, value in rows:
        print(f"{name}: {value}")
    return 0


def _toy_gradcheck_config(seed: int) -> RunConfig:
    return RunConfig(d=16, d_word=16, heads=4, ffn_inner=32, shared_blocks=1,
                     model_q_blocks=1, model_p_blocks=1, decoder_blocks=1,
                     dropout=0.0, k_passages=2, j_max=6, l_max=8, t_max=8,
                     common_size=64, batch_size=2, total_steps=10,
                     warmup_steps=1, seed=seed)


def gradcheck_suite(cfg: RunConfig, seed: int) -> float:
    """End-to-end total_loss derivative check on a 2-example batch
    (one answerable, one not). Returns the worst relative error."""
    examples = synth_corpus(SynthSpec(n=24, seed=seed,
                                      k_passages=cfg.k_passages,
                                      unanswerable_frac=0.25))
    vocab = build_vocabulary(examples, cfg.common_size, cfg.styles)
    model = Masque(cfg, vocab)
    able = next(e for e in examples if e.answers.get("nlg"))
    unable = next(e for e in examples if not e.answers.get("qa"))
    batch = [encode_example(able, vocab, "nlg", cfg.limits()),
             encode_example(unable, vocab, "qa", cfg.limits())]
    ctx = RunCtx(training=True, seed=cfg.seed, step=1)  # dropout rate is 0

    def f():
        outs = [model.forward_example(enc, ctx) for enc in batch]
        return total_loss(decoder_loss(outs),
                          ranking_loss(outs, cfg.smooth_pos),
                          classification_loss(outs, cfg.smooth_pos),
                          cfg.gamma_rank, cfg.gamma_cls)

    return T.gradient_check(f, dict(model.store.items()), seed=seed)


def cmd_gradcheck(args) -> int:
    seed = _seed_or_env(args.seed)
    if args.config:
        cfg = _load_cfg(args)
        if cfg.dropout != 0.0:
            raise ConfigError("gradcheck requires dropout=0 "
                              "(finite differences need a deterministic loss)")
    else:
        cfg = _toy_gradcheck_config(seed)
    worst = gradcheck_suite(cfg, seed)
    print(f"max relative error: {worst:.3e} (tolerance {GRADCHECK_TOL:g})")
    return 0 if worst < GRADCHECK_TOL else 1


def cmd_trace(args) -> int:
    rows = []
    with open(args.trace_in, "r", encoding="utf-8") as fh:
        for i, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise DataError(f"{args.trace_in}:{i}: {e}")
    lengths, lams = decode_report(rows, rows)
    columns = ("kind", "style", "t", "n", "mean_len", "stderr",
               "lam_gen", "lam_copy_q", "lam_copy_p")
    lines = [",".join(columns)]
    for row in lengths + lams:
        lines.append(",".join(str(row.get(c, "")) for c in columns))
    atomic_write_text(args.out, "\n".join(lines) + "\n")
    print(f"summarized {len(rows)} traces to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="masque",
                     description="Multi-style reading-comprehension model")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--unanswerable-frac", type=float, default=0.0)
    p.add_argument("--k-passages", type=int, default=3)
    p.add_argument("--oov-val-frac", type=float, default=0.7)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", default=None,
                   help="config JSON path or the name 'full'")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config field")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--style", default=None,
                   help="train on one style only (disables mixing)")
    p.add_argument("--no-mixing", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("decode", help="greedy-decode a dataset")
    p.add_argument("--ckpt", required=True, help="checkpoint prefix")
    p.add_argument("--data", required=True)
    p.add_argument("--style", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--trace", default=None, help="write per-step trace JSONL")
    p.add_argument("--gold-ranker", action="store_true",
                   help="use marked relevance instead of predicted")
    p.add_argument("--answerable-threshold", type=float, default=None)
    p.add_argument("--live-weights", action="store_true",
                   help="decode with live weights instead of the EMA shadow")
    p.add_argument("--reader-hash", action="store_true",
                   help="print a digest of reader activations")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("eval", help="score predictions")
    p.add_argument("--pred", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--metrics", default="rouge,bleu,map,mrr,f1")
    p.add_argument("--strip-punct", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="end-to-end gradient suite")
    p.add_argument("--config", default=None)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("trace", help="summarize a trace file")
    p.add_argument("--in", dest="trace_in", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_trace)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "answerable_threshold", None) is None \
            and args.func is cmd_decode:
        args.answerable_threshold = 0.5
    try:
        return args.func(args)
    except (ConfigError, DataError, StyleError, TrainingError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"io error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
