"""Command-line front end.

Exit codes: 0 success, 1 usage/config error, 2 numerical failure, 3 IO error.
Diagnostics go to stderr; data goes to files under ``--out`` or to stdout.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict

from . import __version__
from .accounting import format_table, load_totals, summarize
from .autodiff import NonFiniteError
from .config import ConfigError, load_config
from .data import generate_dataset
from .harness import ablate_lambda, pretrain_teacher, run_experiment, score_dump
from .model import load_checkpoint, save_checkpoint

logger = logging.getLogger("regate")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(EXIT_USAGE)


def _common(p: argparse.ArgumentParser, out_required: bool = True) -> None:
    p.add_argument("--config", help="experiment config (JSON)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted-path override, e.g. schedule.cycle=64 (repeatable)")
    p.add_argument("--seed", type=int, help="override the master and data seed")
    p.add_argument("--out", required=out_required, help="output directory")
    p.add_argument("--quiet", action="store_true", help="only warnings on stderr")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="regate", description="Teacher-guided token gating harness for small transformers.")
    parser.add_argument("--version", action="version", version=f"regate {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write the synthetic dataset as JSON lines")
    _common(p)

    p = sub.add_parser("pretrain-teacher", help="pretrain and freeze the text-only teacher")
    _common(p)

    p = sub.add_parser("train", help="run the baseline and/or regate arm")
    _common(p)
    p.add_argument("--mode", choices=["baseline", "regate", "both"], help="arm(s) to run (default: config mode)")
    p.add_argument("--teacher", help="teacher checkpoint; pretrained on the fly if omitted")

    p = sub.add_parser("ablate-lambda", help="one regate run per teacher weight")
    _common(p)
    p.add_argument("--lambdas", help="comma-separated list (default: config ablation_lambdas)")
    p.add_argument("--teacher", help="teacher checkpoint; pretrained on the fly if omitted")

    p = sub.add_parser("score-dump", help="per-token reference loss / EMA records as JSON lines")
    _common(p, out_required=False)
    p.add_argument("--samples", required=True, help="comma-separated sample ids")
    p.add_argument("--teacher", help="teacher checkpoint; pretrained on the fly if omitted")
    p.add_argument("--train-first", action="store_true",
                   help="run the regate arm first so ema/kept fields are populated")

    p = sub.add_parser("accounting", help="per-arm token totals from metrics CSVs")
    p.add_argument("metrics", nargs="+", help="metrics CSV files (one per arm)")
    p.add_argument("--json", action="store_true", help="emit JSON instead of a table")

    p = sub.add_parser("selfcheck", help="run the embedded invariant suite")
    p.add_argument("--quiet", action="store_true")
    return parser


def _cfg(args):
    return load_config(args.config, args.overrides, args.seed)


def _teacher(args):
    if getattr(args, "teacher", None):
        params, _ = load_checkpoint(args.teacher, requires_grad=False)
        return params.frozen()
    return None


def _ids(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise UsageError(f"bad sample id list {text!r}") from exc


def cmd_gen_data(args) -> int:
    cfg = _cfg(args)
    splits = generate_dataset(cfg.task)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "dataset.jsonl")
    with open(path, "w") as fh:
        for name in ("pretrain", "finetune", "heldout"):
            for s in getattr(splits, name):
                fh.write(json.dumps({"split": name, **s.to_json()}) + "\n")
    logger.info("wrote %s", path)
    return EXIT_OK


def cmd_pretrain_teacher(args) -> int:
    cfg = _cfg(args)
    teacher, report = pretrain_teacher(cfg)
    os.makedirs(args.out, exist_ok=True)
    save_checkpoint(os.path.join(args.out, "teacher.ckpt"), teacher, asdict(report))
    with open(os.path.join(args.out, "teacher_report.json"), "w") as fh:
        json.dump({"version": __version__, **asdict(report)}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _cfg(args)
    if args.mode:
        cfg = cfg.replace(mode=args.mode)
    results = run_experiment(cfg, args.out, teacher=_teacher(args))
    for res in results.values():
        print(json.dumps(res.summary, sort_keys=True))
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _cfg(args)
    lambdas = None
    if args.lambdas:
        try:
            lambdas = [float(x) for x in args.lambdas.split(",")]
        except ValueError as exc:
            raise UsageError(f"bad lambda list {args.lambdas!r}") from exc
        if any(l < 0 for l in lambdas):
            raise UsageError("lambdas must be non-negative")
    rows = ablate_lambda(cfg, lambdas, args.out, teacher=_teacher(args))
    print("lambda\tdescription\theldout_loss\tlabel_tokens")
    for r in rows:
        print(f"{r['lambda']:g}\t{r['description']}\t{r['heldout_loss']:.4f}\t{r['label_tokens']}")
    return EXIT_OK


def cmd_score_dump(args) -> int:
    cfg = _cfg(args)
    ids = _ids(args.samples)
    splits = generate_dataset(cfg.task)
    by_id = splits.by_id()
    missing = [i for i in ids if i not in by_id]
    if missing:
        raise UsageError(f"unknown sample id(s): {missing}")
    teacher = _teacher(args)
    state = None
    if args.train_first:
        results = run_experiment(cfg.replace(mode="regate"), args.out, teacher=teacher)
        state = results["regate"].state
        teacher = state.teacher
    elif teacher is None:
        teacher, _ = pretrain_teacher(cfg, splits)
    lines = [json.dumps(r) for r in score_dump(teacher, [by_id[i] for i in ids], state, cfg.score.lam)]
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "scores.jsonl"), "w") as fh:
            fh.write("\n".join(lines) + "\n")
    else:
        sys.stdout.write("\n".join(lines) + "\n")
    return EXIT_OK


def cmd_accounting(args) -> int:
    try:
        totals = load_totals(args.metrics)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    rows = summarize(totals)
    if args.json:
        print(json.dumps({"version": __version__, "arms": rows}, indent=2))
    else:
        print(f"# regate {__version__}")
        print(format_table(rows))
    return EXIT_OK


def cmd_selfcheck(args) -> int:
    from .selfcheck import run_all

    results = run_all()
    for r in results:
        print(r.line())
    return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERIC


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain-teacher": cmd_pretrain_teacher,
    "train": cmd_train,
    "ablate-lambda": cmd_ablate,
    "score-dump": cmd_score_dump,
    "accounting": cmd_accounting,
    "selfcheck": cmd_selfcheck,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING if getattr(args, "quiet", False) else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)
    logger.info("regate %s %s", __version__, args.command)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, UsageError) as exc:
        print(f"regate: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NonFiniteError, FloatingPointError) as exc:
        print(f"regate: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"regate: io error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
