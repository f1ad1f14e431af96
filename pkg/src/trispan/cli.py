"""Command-line interface: gen, train, eval, predict, bench, ablate.

Every run directory receives the effective configuration and a manifest
(seed, version, argv, thread settings) before any work starts, so a run can
be reproduced from its outputs alone.  Exit codes: 0 success, 1 usage or
configuration error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import fields, replace

from threadpoolctl import threadpool_limits

from . import __version__
from .bench import BenchConfig, bench_cross_scoring, bench_scoring
from .data_eval import (
    DEFAULT_LABELS,
    evaluate,
    generate_synthetic,
    load_corpus,
    load_predictions,
    save_corpus,
    save_predictions,
)
from .errors import ConfigError, DataError, EvalError, NumericError, ShapeError, VocabError
from .pipeline import ABLATION_SETTINGS, Model, ModelConfig, train


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); the contract wants 1
        raise UsageError(message)


def _add_config_flags(parser: argparse.ArgumentParser, config_cls) -> None:
    for f in fields(config_cls):
        flag = "--" + f.name.replace("_", "-")
        if isinstance(f.default, bool):
            parser.add_argument(flag, dest=f.name, action=argparse.BooleanOptionalAction, default=None)
        else:
            parser.add_argument(flag, dest=f.name, type=type(f.default), default=None)


def _parse_config_file(path: str, config_cls) -> dict:
    """Flat `key = value` lines; '#' starts a comment; keys must be config fields."""
    known = {f.name: f for f in fields(config_cls)}
    values: dict = {}
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    for lineno, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
        default = known[key].default
        try:
            if isinstance(default, bool):
                if raw.lower() not in ("true", "false", "1", "0"):
                    raise ValueError(f"boolean key {key} needs true/false")
                values[key] = raw.lower() in ("true", "1")
            else:
                values[key] = type(default)(raw)
        except ValueError as exc:
            raise ConfigError(f"{path}:{lineno}: bad value for {key}: {exc}") from exc
    return values


def _resolve_config(config_cls, args):
    values = {f.name: f.default for f in fields(config_cls)}
    if getattr(args, "config", None):
        values.update(_parse_config_file(args.config, config_cls))
    for f in fields(config_cls):
        override = getattr(args, f.name, None)
        if override is not None:
            values[f.name] = override
    return config_cls(**values)


def _write_run_records(out_dir: str, command: str, cfg_obj, argv: list[str]) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "effective_config.txt"), "w") as fh:
        for f in sorted(fields(cfg_obj), key=lambda f: f.name):
            fh.write(f"{f.name} = {getattr(cfg_obj, f.name)}\n")
    manifest = {
        "command": command,
        "version": __version__,
        "argv": argv,
        "seed": getattr(cfg_obj, "seed", None),
        "threads": os.environ.get("TRISPAN_THREADS", "unset"),
        "logical_cpus": os.cpu_count(),
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen(args, argv) -> int:
    labels = tuple(part.strip() for part in args.labels.split(",") if part.strip())
    total = args.n_train + args.n_dev + args.n_test
    corpus = generate_synthetic(
        seed=args.seed,
        n_sentences=total,
        labels=labels,
        max_depth=args.max_depth,
        max_len=args.max_sentence_len,
        nested_prob=args.nested_prob,
    )
    os.makedirs(args.out, exist_ok=True)
    splits = {
        "train": corpus[: args.n_train],
        "dev": corpus[args.n_train : args.n_train + args.n_dev],
        "test": corpus[args.n_train + args.n_dev :],
    }
    for name, part in splits.items():
        save_corpus(os.path.join(args.out, f"{name}.jsonl"), part)
    manifest = {
        "command": "gen",
        "version": __version__,
        "argv": argv,
        "seed": args.seed,
        "labels": list(labels),
        "max_depth": args.max_depth,
        "max_sentence_len": args.max_sentence_len,
        "nested_prob": args.nested_prob,
        "splits": {name: len(part) for name, part in splits.items()},
        "threads": os.environ.get("TRISPAN_THREADS", "unset"),
        "logical_cpus": os.cpu_count(),
    }
    with open(os.path.join(args.out, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote {', '.join(f'{len(p)} {n}' for n, p in splits.items())} sentences to {args.out}")
    return 0


def cmd_train(args, argv) -> int:
    cfg = _resolve_config(ModelConfig, args)
    _write_run_records(args.out, "train", cfg, argv)
    train_examples = load_corpus(args.train)
    dev_examples = load_corpus(args.dev) if args.dev else None
    result = train(cfg, train_examples, dev_examples, out_dir=args.out, log=print)
    print(f"checkpoint: {result.checkpoint_path}")
    if result.best_path:
        print(f"best dev checkpoint: {result.best_path} (F1={result.best_dev_f1:.4f})")
    return 0


def cmd_eval(args, argv) -> int:
    gold = load_corpus(args.gold)
    if (args.pred is None) == (args.checkpoint is None):
        raise UsageError("eval needs exactly one of --pred or --checkpoint")
    if args.pred:
        predictions = load_predictions(args.pred)
    else:
        model = Model.load(args.checkpoint)
        predictions = [model.decode(ex, sid) for sid, ex in enumerate(gold)]
    report = evaluate(gold, predictions)
    print(report.format_text())
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "eval_report.json"), "w") as fh:
            json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
    return 0


def cmd_predict(args, argv) -> int:
    model = Model.load(args.checkpoint)
    corpus = load_corpus(args.corpus)
    predictions = [model.decode(ex, sid) for sid, ex in enumerate(corpus)]
    save_predictions(args.out, predictions)
    n = sum(len(p.entities) for p in predictions)
    print(f"wrote {n} predicted entities for {len(corpus)} sentences to {args.out}")
    return 0


def cmd_bench(args, argv) -> int:
    cfg = _resolve_config(BenchConfig, args)
    stages = ("token", "cross") if args.stage == "both" else (args.stage,)
    if args.out:
        _write_run_records(args.out, "bench", cfg, argv)
    for stage in stages:
        report = bench_scoring(cfg) if stage == "token" else bench_cross_scoring(cfg)
        print(report.format_text())
        print()
        if args.out:
            with open(os.path.join(args.out, f"bench_{stage}.json"), "w") as fh:
                json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
                fh.write("\n")
    return 0


def cmd_ablate(args, argv) -> int:
    cfg = _resolve_config(ModelConfig, args)
    _write_run_records(args.out, "ablate", cfg, argv)
    train_examples = load_corpus(args.train)
    dev_examples = load_corpus(args.dev)
    rows = []
    for setting in ABLATION_SETTINGS:
        run_cfg = replace(cfg, setting=setting)
        run_dir = os.path.join(args.out, f"setting_{setting}")
        result = train(run_cfg, train_examples, dev_examples, out_dir=run_dir)
        last = result.metrics[-1]
        rows.append(
            {
                "setting": setting,
                "dev_precision": last.dev_precision,
                "dev_recall": last.dev_recall,
                "dev_f1": last.dev_f1,
                "train_loss": last.total_loss,
            }
        )
        print(f"setting {setting}: dev F1 {last.dev_f1:.4f}")
    header = f"{'setting':<9}{'dev P':>8}{'dev R':>8}{'dev F1':>8}{'loss':>10}"
    lines = [header]
    for row in rows:
        lines.append(
            f"{row['setting']:<9}{row['dev_precision']:>8.4f}{row['dev_recall']:>8.4f}"
            f"{row['dev_f1']:>8.4f}{row['train_loss']:>10.4f}"
        )
    by = {row["setting"]: row["dev_f1"] for row in rows}
    lines.append(
        f"ordering check (reported, not asserted): "
        f"F1(h)={by['h']:.4f} F1(g)={by['g']:.4f} F1(a)={by['a']:.4f}"
    )
    table = "\n".join(lines)
    print(table)
    with open(os.path.join(args.out, "ablation.json"), "w") as fh:
        json.dump({"rows": rows, "seed": cfg.seed}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(args.out, "ablation.txt"), "w") as fh:
        fh.write(table + "\n")
    return 0


# ---------------------------------------------------------------------------
# parser wiring
# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="trispan", description=__doc__)
    parser.add_argument("--version", action="version", version=f"trispan {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen", help="generate a synthetic nested corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=1234)
    p.add_argument("--n-train", type=int, default=200)
    p.add_argument("--n-dev", type=int, default=50)
    p.add_argument("--n-test", type=int, default=50)
    p.add_argument("--labels", default=",".join(DEFAULT_LABELS))
    p.add_argument("--max-depth", type=int, default=3)
    p.add_argument("--max-sentence-len", type=int, default=18)
    p.add_argument("--nested-prob", type=float, default=0.45)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--train", required=True)
    p.add_argument("--dev")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    _add_config_flags(p, ModelConfig)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score predictions or a checkpoint against gold")
    p.add_argument("--gold", required=True)
    p.add_argument("--pred")
    p.add_argument("--checkpoint")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="write predictions for a corpus")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("bench", help="time naive vs decomposed scoring")
    p.add_argument("--stage", choices=("token", "cross", "both"), default="both")
    p.add_argument("--out")
    p.add_argument("--config")
    _add_config_flags(p, BenchConfig)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("ablate", help="train every ablation setting on one corpus")
    p.add_argument("--train", required=True)
    p.add_argument("--dev", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    _add_config_flags(p, ModelConfig)
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    limiter = None
    env_threads = os.environ.get("TRISPAN_THREADS")
    try:
        if env_threads:
            limiter = threadpool_limits(limits=int(env_threads))
        parser = build_parser()
        args = parser.parse_args(argv)
        if not getattr(args, "func", None):
            raise UsageError("a subcommand is required (gen, train, eval, predict, bench, ablate)")
        return args.func(args, argv)
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (DataError, VocabError, EvalError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except (NumericError, ShapeError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3
    finally:
        if limiter is not None:
            limiter.unregister()


if __name__ == "__main__":
    sys.exit(main())
