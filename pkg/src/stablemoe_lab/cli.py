"""Command-line entry points. Errors print as ``<category>: <message>`` with a nonzero exit."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .corpus import load_corpus
from .evaluation import evaluate_stream
from .exceptions import ContractError, StableMoEError
from .fluctuation import cumulative_curve, expert_token_report, read_fluctuation_log
from .model import ROUTER_KINDS
from .reporting import emit_reports, run_compare
from .training import TrainConfig, Trainer, load_model

EXIT_CODES = {"contract": 2, "dimension": 2, "config": 2, "integrity": 3, "io": 4, "error": 1}


class ConfigError(StableMoEError):
    category = "config"


def read_config(path, **overrides) -> tuple[TrainConfig, str]:
    """Flat JSON mirroring TrainConfig plus a ``corpus`` path; non-None overrides win."""
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path} must hold a JSON object")
    file_corpus = data.pop("corpus", None)
    corpus = overrides.pop("corpus", None) or file_corpus
    if corpus is None:
        raise ConfigError("config needs a 'corpus' path to a text file")
    data.update({k: v for k, v in overrides.items() if v is not None})
    try:
        cfg = TrainConfig.from_dict(data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    corpus_path = Path(corpus)
    if not corpus_path.is_absolute():
        corpus_path = Path(path).parent / corpus_path
    return cfg, str(corpus_path)


def _print(payload) -> None:
    print(json.dumps(payload, indent=2, sort_keys=True))


def cmd_train(args) -> int:
    cfg, corpus_path = read_config(args.config, router=args.router, seed=args.seed, corpus=args.data)
    corpus = load_corpus(corpus_path, cfg.split_fractions, cfg.seed)
    out = Path(args.out or f"runs/{cfg.router}-seed{cfg.seed}")
    trainer = Trainer(cfg, corpus, out_dir=out).run()
    report = trainer.report()
    manifest = emit_reports(report, corpus, out, top_k=args.top_k)
    trainer.save_checkpoint(out / "checkpoint.npz")
    _print({"manifest_id": manifest.manifest_id, "out": str(out), "valid_ppl": report.final_valid_ppl,
            "test_ppl": report.test_ppl, "freeze_step": report.freeze_step,
            "agreement_at_freeze": report.agreement_at_freeze})
    return 0


def _checkpoint_and_data(args):
    cfg, model = load_model(args.checkpoint)
    corpus = load_corpus(args.data, cfg.split_fractions, cfg.seed)
    return cfg, model, corpus


def cmd_eval(args) -> int:
    cfg, model, corpus = _checkpoint_and_data(args)
    valid = evaluate_stream(model, corpus.valid, cfg.seq_len)
    payload = {"router": cfg.router, "valid_ppl": valid.ppl, "routing_agreement": valid.agreement}
    payload["test_ppl"] = evaluate_stream(model, corpus.test, cfg.seq_len).ppl if corpus.test.shape[0] >= 2 else None
    _print(payload)
    return 0


def cmd_analyze(args) -> int:
    history = read_fluctuation_log(args.log)
    if not len(history):
        raise ContractError(f"{args.log} holds no snapshots")
    if args.total_steps < history.steps[-1]:
        raise ContractError(f"total steps {args.total_steps} precede the last snapshot at {history.steps[-1]}")
    print(cumulative_curve(history, args.total_steps, by_type=args.by_type).to_json())
    return 0


def cmd_report_experts(args) -> int:
    cfg, model, corpus = _checkpoint_and_data(args)
    if not model.has_moe:
        raise ContractError("a dense checkpoint has no experts to report")
    ev = evaluate_stream(model, corpus.valid, cfg.seq_len)
    rep = expert_token_report(ev.assignment, ev.tokens, args.top_k, cfg.num_experts)
    _print({"router": cfg.router, "top_k": args.top_k,
            "experts": {str(e): [[tok, n] for tok, n in items] for e, items in rep.items()}})
    return 0


def cmd_compare(args) -> int:
    cfg, corpus_path = read_config(args.config, seed=args.seed, corpus=args.data)
    corpus = load_corpus(corpus_path, cfg.split_fractions, cfg.seed)
    run_compare(cfg, corpus, args.out, top_k=args.top_k)
    print((Path(args.out) / "summary.txt").read_text(), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stablemoe-lab", description="Two-stage MoE routing experiments at desk scale.")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one router variant and write its reports")
    t.add_argument("--config", required=True)
    t.add_argument("--router", choices=ROUTER_KINDS)
    t.add_argument("--seed", type=int)
    t.add_argument("--out")
    t.add_argument("--data", help="corpus path, overriding the config")
    t.add_argument("--top-k", type=int, default=10)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="perplexity of a checkpoint on a corpus")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("analyze-fluctuation", help="cumulative last-fluctuation curve from a snapshot log")
    a.add_argument("--log", required=True)
    a.add_argument("--total-steps", type=int, required=True)
    a.add_argument("--by-type", action="store_true")
    a.set_defaults(func=cmd_analyze)

    r = sub.add_parser("report-experts", help="most frequent tokens per expert")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--top-k", type=int, required=True)
    r.set_defaults(func=cmd_report_experts)

    c = sub.add_parser("compare", help="train every router on one config and merge the summaries")
    c.add_argument("--config", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--seed", type=int)
    c.add_argument("--data")
    c.add_argument("--top-k", type=int, default=10)
    c.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except StableMoEError as exc:
        category, message = exc.category, str(exc)
    except OSError as exc:
        category, message = "io", str(exc)
    print(f"{category}: {message}", file=sys.stderr)
    return EXIT_CODES.get(category, 1)


if __name__ == "__main__":
    sys.exit(main())
