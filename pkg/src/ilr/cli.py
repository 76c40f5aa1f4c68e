"""Command-line entry point: ``ilr {train,eval,flops,sweep,verify,probe}``.

Exit codes: 0 success, 2 usage or config error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from ilr import numcore as nc
from ilr.config import ConfigError, RunConfig, load_run_config
from ilr.data import (
    PAD_ID,
    detokenize,
    load_token_cache,
    read_corpus,
    save_token_cache,
    split,
    stdlib_text,
    synthetic_text,
    tokenize_bytes,
    batch_stream,
)
from ilr.model import init_params, load_checkpoint
from ilr.recurrence import forward, logit_probe, strategy_from_dict, strategy_to_dict, validate

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3

log = logging.getLogger("ilr")


def _fail(msg: str, code: int = EXIT_USAGE) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return code


def load_tokens(rc: RunConfig) -> np.ndarray:
    d = rc.data
    if d.cache and Path(d.cache).is_file():
        return load_token_cache(d.cache)
    if d.paths:
        tokens = read_corpus(d.paths)
    elif d.builtin == "stdlib":
        tokens = tokenize_bytes(stdlib_text(d.builtin_bytes))
    elif d.builtin == "synthetic":
        tokens = tokenize_bytes(synthetic_text(d.builtin_bytes, seed=0))
    else:
        raise ConfigError("data.paths is empty and no builtin corpus selected")
    if d.cache:
        save_token_cache(d.cache, tokens)
    return tokens


def _config_with_seed(args) -> RunConfig:
    rc = load_run_config(args.config)
    if getattr(args, "seed", None) is not None:
        rc = RunConfig.from_dict({**rc.to_dict(), "seed": args.seed})
    return rc


def cmd_train(args) -> int:
    from ilr.analysis import perplexity
    from ilr.seeds import derive_seed
    from ilr.train import NumericalError, train

    try:
        rc = _config_with_seed(args)
        tokens = load_tokens(rc)
        corpus = split(tokens, rc.data.test_fraction, rc.train.seq_len, rc.data.paths)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        return _fail(str(exc))
    if rc.model.vocab_size <= int(tokens.max()):
        return _fail(f"model.vocab_size {rc.model.vocab_size} too small for byte ids (need >= 256)")
    out = Path(args.out or rc.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    params = init_params(rc.model, derive_seed(rc.seed, "init"), dtype=rc.train.dtype)
    try:
        stream = batch_stream(corpus.train, rc.train.batch_size, rc.train.seq_len,
                              derive_seed(rc.seed, "batch-order"))
    except ValueError as exc:
        return _fail(str(exc))
    t0 = time.perf_counter()
    try:
        report = train(params, stream, rc.strategy, rc.train, out_dir=out, log_path=out / "train_log.jsonl")
    except NumericalError as exc:
        return _fail(str(exc), EXIT_NUMERIC)
    log.info("trained %d steps in %.1fs", rc.train.total_steps, time.perf_counter() - t0)
    ev = perplexity(params, rc.strategy, corpus.test, rc.train.seq_len, rc.train.batch_size)
    summary = {
        "config": rc.to_dict(),
        "num_params": params.num_params(),
        "train": report.summary(rc.strategy),
        "eval": ev.to_dict(),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True), encoding="utf-8")
    if not args.no_plots and report.losses:
        from ilr.plotting import plot_training

        plot_training(report, out / "train.png", title=rc.strategy.label())
    print(json.dumps({"summary": str(out / "summary.json"), "perplexity": ev.perplexity,
                      "final_loss": summary["train"]["final_loss"]}))
    return EXIT_OK


def cmd_eval(args) -> int:
    from ilr.analysis import perplexity

    try:
        params, header = load_checkpoint(args.checkpoint)
    except (OSError, ValueError, KeyError) as exc:
        return _fail(f"cannot read checkpoint {args.checkpoint}: {exc}")
    try:
        strategy = strategy_from_dict(json.loads(args.strategy) if args.strategy
                                      else header.get("strategy", {"strategy": "baseline"}))
        validate(strategy, params.config)
        seq_len = args.seq_len or header.get("train", {}).get("seq_len") or params.config.max_seq_len
        tokens = read_corpus(args.corpus)
        corpus = split(tokens, args.test_fraction, seq_len)
        ev = perplexity(params, strategy, corpus.test, seq_len)
    except (ValueError, FileNotFoundError, json.JSONDecodeError) as exc:
        return _fail(str(exc))
    print(json.dumps(ev.to_dict()))
    return EXIT_OK


def cmd_flops(args) -> int:
    from ilr.analysis import flops_table

    try:
        rc = load_run_config(args.config)
    except ConfigError as exc:
        return _fail(str(exc))
    tokens = args.tokens or rc.train.total_steps * rc.train.batch_size * rc.train.seq_len
    table = flops_table(rc.model, rc.train.seq_len, tokens, rc.strategy, causal=not args.full_attention)
    text = json.dumps(table, indent=2)
    print(text)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "flops.json").write_text(text, encoding="utf-8")
        if not args.no_plots:
            from ilr.plotting import plot_flops

            plot_flops(table, out / "flops.png")
    return EXIT_OK


def cmd_sweep(args) -> int:
    from ilr.analysis import sweep, write_sweep

    try:
        rc = _config_with_seed(args)
        if not rc.sweep.strategies:
            return _fail("sweep.strategies is empty")
        tokens = load_tokens(rc)
        corpus = split(tokens, rc.data.test_fraction, rc.train.seq_len, rc.data.paths)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        return _fail(str(exc))
    result = sweep(corpus, rc.model, rc.sweep.strategies, rc.train, rc.sweep.seeds,
                   rc.sweep.pos_modes or None, jobs=args.jobs)
    out = Path(args.out or rc.output_dir)
    csv_path, json_path = write_sweep(result, out)
    if not args.no_plots:
        from ilr.plotting import plot_sweep

        plot_sweep(result, out / "sweep.png")
    print(result.format_table())
    print(json.dumps({"csv": str(csv_path), "json": str(json_path)}))
    failed = sum(r.status != "ok" for r in result.rows)
    if failed == len(result.rows):
        return _fail("every sweep run failed", EXIT_NUMERIC)
    return EXIT_OK


def cmd_verify(args) -> int:
    from ilr.verify import run_suite

    nc.set_threads(1)
    t0 = time.perf_counter()
    checks = run_suite(args.scale, log=print)
    failed = [c for c in checks if not c.passed]
    print(f"{len(checks) - len(failed)}/{len(checks)} checks passed in {time.perf_counter() - t0:.1f}s")
    return EXIT_NUMERIC if failed else EXIT_OK


def cmd_probe(args) -> int:
    try:
        params, header = load_checkpoint(args.checkpoint)
        strategy = strategy_from_dict(json.loads(args.strategy) if args.strategy
                                      else header.get("strategy", {"strategy": "baseline"}))
        validate(strategy, params.config)
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        return _fail(str(exc))
    ids = tokenize_bytes(args.text)[-params.config.max_seq_len:]
    if len(ids) == 0:
        return _fail("probe text is empty")
    with torch.no_grad():
        _, trace = forward(params, torch.as_tensor(ids), strategy, capture=True)
    entries = logit_probe(params, trace, args.top_k)
    report = []
    for e in entries:
        top = [{"token": int(t), "text": detokenize([t]).decode("latin-1") if t != PAD_ID else "<pad>",
                "prob": float(p)} for t, p in zip(e.top_ids[-1].tolist(), e.top_probs[-1].tolist())]
        report.append({"state": e.label, "top": top})
    print(json.dumps({"strategy": strategy_to_dict(strategy), "states": report}, indent=2))
    if args.out and not args.no_plots:
        from ilr.plotting import plot_probe

        plot_probe(entries, Path(args.out) / "probe.png", tokens=ids.tolist())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ilr", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one model from a run config")
    t.add_argument("config", help="JSON run config path or preset name")
    t.add_argument("--seed", type=int)
    t.add_argument("--out", help="output directory (default: config output_dir)")
    t.add_argument("--no-plots", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="test perplexity of a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("--corpus", nargs="+", required=True)
    e.add_argument("--strategy", help='JSON override, e.g. \'{"strategy":"ilr","map":[2,1,1,1]}\'')
    e.add_argument("--seq-len", type=int)
    e.add_argument("--test-fraction", type=float, default=0.1)
    e.set_defaults(func=cmd_eval)

    f = sub.add_parser("flops", help="analytical FLOPs report")
    f.add_argument("config")
    f.add_argument("--tokens", type=int, help="training tokens (default: steps x batch x seq_len)")
    f.add_argument("--full-attention", action="store_true", help="count all T^2 score pairs")
    f.add_argument("--out")
    f.add_argument("--no-plots", action="store_true")
    f.set_defaults(func=cmd_flops)

    s = sub.add_parser("sweep", help="train and evaluate every strategy x seed x pos mode")
    s.add_argument("config")
    s.add_argument("--seed", type=int)
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--out")
    s.add_argument("--no-plots", action="store_true")
    s.set_defaults(func=cmd_sweep)

    v = sub.add_parser("verify", help="run the gradient and equivalence oracle suite")
    v.add_argument("--scale", choices=("tiny", "small"), default="tiny")
    v.set_defaults(func=cmd_verify)

    pr = sub.add_parser("probe", help="decode every intermediate state of a checkpoint")
    pr.add_argument("checkpoint")
    pr.add_argument("--text", required=True)
    pr.add_argument("--top-k", type=int, default=5)
    pr.add_argument("--strategy")
    pr.add_argument("--out")
    pr.add_argument("--no-plots", action="store_true")
    pr.set_defaults(func=cmd_probe)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    nc.set_threads()
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
