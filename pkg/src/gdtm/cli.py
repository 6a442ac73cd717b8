"""Command-line interface: preprocess, train, eval, trajectories, topics.

Data goes to stdout, diagnostics to stderr. Exit codes: 0 success,
2 usage/config error, 3 input error, 4 numeric error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any

import numpy as np

from . import __version__
from .corpus import (
    build_vocabulary,
    encode,
    load_corpus,
    load_stopwords,
    read_documents,
    save_corpus,
    split_by_timestamps,
)
from .errors import (
    CheckpointError,
    CorpusFormatError,
    GDTMError,
    KernelSpecError,
    NumericError,
    PipelineError,
    SingularKernelError,
    SplitError,
    UnknownWordError,
)
from .evaluation import (
    heldout_perplexity,
    rows_to_csv,
    rows_to_json,
    top_words,
    topics_at_time,
    word_trajectory,
)
from .inference import train
from .kernels import KernelSpec, canonical_variant
from .state import ModelConfig, build_model_inducing, init_model, load_checkpoint, save_checkpoint

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

logger = logging.getLogger("gdtm")

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3, 4

CHECKPOINT_NAME = "checkpoint.gdtm"
HISTORY_NAME = "history.csv"
EFFECTIVE_CONFIG_NAME = "config.json"
HISTORY_HEADER = ("step", "rho", "elbo_estimate", "seconds")

# keys a config file may carry besides the ModelConfig fields
RUN_KEYS = {
    "train_fraction": None,
    "split_seed": 0,
    "eval_seed": 0,
    "min_count": 25,
    "score_threshold": None,
    "max_terms": 20000,
    "min_doc_tokens": 10,
    "stopwords": None,
}


class UsageError(GDTMError):
    pass


def load_config_file(path: str | Path | None) -> dict[str, Any]:
    if path is None:
        return {}
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except FileNotFoundError:
        raise UsageError(f"config file {path} not found") from None
    except tomllib.TOMLDecodeError as exc:
        raise UsageError(f"config file {path}: {exc}") from exc
    model_keys = set(ModelConfig.__dataclass_fields__)
    unknown = set(data) - model_keys - set(RUN_KEYS)
    if unknown:
        raise UsageError(f"config file {path}: unknown keys {sorted(unknown)}")
    return data


def _kernel_from_flags(variant, sigma2, length_scale) -> KernelSpec:
    if canonical_variant(variant) == "wiener":
        length_scale = None
    elif length_scale is None:
        length_scale = 0.1
    return KernelSpec(variant, sigma2=1.0 if sigma2 is None else sigma2, length_scale=length_scale)


def resolve_run_config(args) -> tuple[ModelConfig, dict[str, Any]]:
    """Merge config-file values with command-line overrides (flags win)."""
    data = load_config_file(args.config)
    run = {k: data.get(k, v) for k, v in RUN_KEYS.items()}
    model = {k: v for k, v in data.items() if k in ModelConfig.__dataclass_fields__}
    overrides = {
        "seed": getattr(args, "seed", None),
        "threads": getattr(args, "threads", None),
        "num_topics": getattr(args, "topics", None),
        "alpha": getattr(args, "alpha", None),
        "batch_size": getattr(args, "batch_size", None),
        "num_inducing": getattr(args, "inducing", None),
        "num_steps": getattr(args, "steps", None),
        "checkpoint_every": getattr(args, "checkpoint_every", None),
        "inducing_placement": getattr(args, "placement", None),
    }
    model.update({k: v for k, v in overrides.items() if v is not None})
    model.setdefault("threads", os.cpu_count() or 1)
    if getattr(args, "kernel", None) is not None:
        model["kernel"] = _kernel_from_flags(args.kernel, args.sigma2, args.length_scale)
    for key in ("train_fraction", "split_seed", "min_count", "score_threshold", "max_terms", "min_doc_tokens", "stopwords"):
        value = getattr(args, key, None)
        if value is not None:
            run[key] = value
    try:
        config = ModelConfig.from_dict(model)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid model configuration: {exc}") from exc
    return config, run


# -- commands --------------------------------------------------------------------


def cmd_preprocess(args) -> int:
    _, run = resolve_run_config(args)
    raw = read_documents(args.input, args.format)
    if not raw:
        raise PipelineError("read", f"{args.input} contains no documents")
    stop = load_stopwords(run["stopwords"])
    vocab = build_vocabulary(raw, stop, run["min_count"], run["score_threshold"], run["max_terms"])
    corpus = encode(raw, vocab, run["min_doc_tokens"])
    save_corpus(corpus, args.output)
    report = {"vocabulary": vocab.stats, "encode": corpus.stats, "output": str(args.output)}
    print(json.dumps(report, indent=2, sort_keys=True))
    return EXIT_OK


def _read_history(path: Path, upto: int) -> list[list[str]]:
    if not path.exists():
        return []
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    return [r for r in rows[1:] if r and int(r[0]) <= upto]


def _write_history(path: Path, rows: list[list[str]]) -> None:
    tmp = path.with_suffix(".tmp")
    with tmp.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(HISTORY_HEADER)
        writer.writerows(rows)
    os.replace(tmp, path)


def _history_row(record, timing: bool) -> list[str]:
    return [
        str(record.step),
        repr(record.rho),
        "" if record.elbo_estimate is None else repr(record.elbo_estimate),
        repr(record.seconds) if timing else "",
    ]


def cmd_train(args) -> int:
    config, run = resolve_run_config(args)
    full = load_corpus(args.corpus)
    outdir = Path(args.checkpoint_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    ckpt_path = outdir / CHECKPOINT_NAME
    hist_path = outdir / HISTORY_NAME

    if args.resume:
        if not ckpt_path.exists():
            raise CheckpointError(f"no checkpoint to resume in {outdir}")
        ckpt = load_checkpoint(ckpt_path, expected_fingerprint=full.fingerprint)
        target_steps = config.num_steps if args.steps is not None else ckpt.config.num_steps
        config = ModelConfig.from_dict({**ckpt.config.to_dict(), "num_steps": target_steps, "threads": config.threads})
        run["train_fraction"] = ckpt.extra.get("train_fraction")
        run["split_seed"] = ckpt.extra.get("split_seed", 0)
        state, inducing = ckpt.state, ckpt.inducing
        rows = _read_history(hist_path, state.step_count)
    else:
        state = inducing = None
        rows = []
    corpus = full
    if run["train_fraction"] is not None:
        corpus, _ = split_by_timestamps(full, run["train_fraction"], run["split_seed"])
    if state is None:
        inducing = build_model_inducing(corpus, config)
        state = init_model(corpus, config, inducing)
    elif not np.array_equal(inducing.train_times, corpus.times):
        raise CheckpointError("checkpoint training times do not match the corpus split")

    extra = {"train_fraction": run["train_fraction"], "split_seed": run["split_seed"]}
    effective = {"model": config.to_dict(), "run": run, "corpus": str(args.corpus)}
    (outdir / EFFECTIVE_CONFIG_NAME).write_text(json.dumps(effective, indent=2, sort_keys=True) + "\n")
    logger.info("effective config: %s", json.dumps(effective, sort_keys=True))

    def save(st):
        save_checkpoint(ckpt_path, st, config, inducing, corpus.terms, full.fingerprint, extra)
        _write_history(hist_path, rows)

    def on_step(record, st):
        rows.append(_history_row(record, args.timing))
        if config.checkpoint_every and record.step % config.checkpoint_every == 0:
            save(st)

    remaining = max(config.num_steps - state.step_count, 0)
    state, _ = train(corpus, config, inducing, state, num_steps=remaining, callbacks=[on_step])
    save(state)
    logger.info("finished at step %d; checkpoint %s", state.step_count, ckpt_path)
    return EXIT_OK


def _open_checkpoint(path, corpus=None):
    path = Path(path)
    if path.is_dir():
        path = path / CHECKPOINT_NAME
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} not found")
    return load_checkpoint(path, expected_fingerprint=None if corpus is None else corpus.fingerprint)


def cmd_eval(args) -> int:
    config, run = resolve_run_config(args)
    full = load_corpus(args.corpus)
    ckpt = _open_checkpoint(args.checkpoint, full)
    fraction = run["train_fraction"] if args.train_fraction is not None else ckpt.extra.get("train_fraction")
    split_seed = args.split_seed if args.split_seed is not None else ckpt.extra.get("split_seed", 0)
    if fraction is None:
        raise UsageError("eval needs --train-fraction (the checkpoint was trained without a split)")
    _, test = split_by_timestamps(full, fraction, split_seed)
    seed = args.seed if args.seed is not None else run["eval_seed"]
    report = heldout_perplexity(test, ckpt.state, ckpt.inducing, ckpt.config, seed=seed)
    out = report.to_dict()
    out.update({"train_fraction": fraction, "split_seed": split_seed, "seed": seed})
    print(json.dumps(out, indent=2, sort_keys=True))
    return EXIT_OK


def _parse_grid(args, ckpt) -> list[float]:
    if args.times:
        return [float(x) for x in args.times.split(",") if x.strip()]
    if args.grid:
        try:
            start, stop, num = args.grid.split(":")
            return np.linspace(float(start), float(stop), int(num)).tolist()
        except ValueError:
            raise UsageError("--grid must look like START:STOP:NUM") from None
    return np.atleast_1d(ckpt.inducing.transform.inverse(ckpt.inducing.train_times)).tolist()


def cmd_trajectories(args) -> int:
    ckpt = _open_checkpoint(args.checkpoint)
    words = [w.strip() for w in args.words.split(",") if w.strip()]
    if not 0 <= args.topic < ckpt.state.K:
        raise UsageError(f"--topic must be in [0, {ckpt.state.K})")
    rows = word_trajectory(ckpt.state, ckpt.inducing, ckpt.terms, args.topic, words, _parse_grid(args, ckpt))
    sys.stdout.write(rows_to_json(rows) + "\n" if args.format == "json" else rows_to_csv(rows))
    return EXIT_OK


def cmd_topics(args) -> int:
    ckpt = _open_checkpoint(args.checkpoint)
    if args.n < 1:
        raise UsageError("--n must be at least 1")
    snap = topics_at_time(ckpt.state, ckpt.inducing, args.time)
    header = ("topic", "rank", "word", "probability")
    rows = []
    for k in range(ckpt.state.K):
        for rank, (word, p) in enumerate(top_words(snap, k, min(args.n, ckpt.state.V), ckpt.terms), start=1):
            rows.append((k, rank, word, p))
    sys.stdout.write(rows_to_json(rows, header) + "\n" if args.format == "json" else rows_to_csv(rows, header))
    return EXIT_OK


# -- parser -------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", help="TOML config file (flags override its values)")
    shared.add_argument("--seed", type=int)
    shared.add_argument("--threads", type=int, help="worker threads for local steps (default: all cores)")
    shared.add_argument("--verbose", "-v", action="count", default=0)

    parser = argparse.ArgumentParser(prog="gdtm", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"gdtm {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", parents=[shared], help="raw text -> encoded corpus file")
    p.add_argument("--input", required=True)
    p.add_argument("--format", choices=("jsonl", "tsv"))
    p.add_argument("--stopwords", help="stop word file (default: bundled English list)")
    p.add_argument("--min-count", type=int, dest="min_count")
    p.add_argument("--score-threshold", type=float, dest="score_threshold")
    p.add_argument("--max-terms", type=int, dest="max_terms")
    p.add_argument("--min-doc-tokens", type=int, dest="min_doc_tokens")
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", parents=[shared], help="fit a model with SVI")
    p.add_argument("--corpus", required=True)
    p.add_argument("--checkpoint-dir", required=True, dest="checkpoint_dir")
    p.add_argument("--topics", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--inducing", type=int, help="number of inducing points")
    p.add_argument("--placement", choices=("quantile", "equidistant"))
    p.add_argument("--steps", type=int, help="total number of SVI steps")
    p.add_argument("--kernel", help="leaf kernel variant (wiener, ou, se, cauchy)")
    p.add_argument("--sigma2", type=float)
    p.add_argument("--length-scale", type=float, dest="length_scale")
    p.add_argument("--train-fraction", type=float, dest="train_fraction")
    p.add_argument("--split-seed", type=int, dest="split_seed")
    p.add_argument("--checkpoint-every", type=int, dest="checkpoint_every")
    p.add_argument("--resume", action="store_true")
    p.add_argument("--timing", action="store_true", help="record wall-clock seconds in history.csv")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[shared], help="held-out perplexity on the test timestamps")
    p.add_argument("--corpus", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--train-fraction", type=float, dest="train_fraction")
    p.add_argument("--split-seed", type=int, dest="split_seed")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("trajectories", parents=[shared], help="word probability trajectories of a topic")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--topic", type=int, required=True)
    p.add_argument("--words", required=True, help="comma-separated words")
    p.add_argument("--grid", help="START:STOP:NUM in raw time units")
    p.add_argument("--times", help="comma-separated raw times")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.set_defaults(func=cmd_trajectories)

    p = sub.add_parser("topics", parents=[shared], help="top words of every topic at a time")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--time", type=float, required=True)
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.set_defaults(func=cmd_topics)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING if args.verbose == 0 else logging.INFO if args.verbose == 1 else logging.DEBUG
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, KernelSpecError) as exc:
        print(f"gdtm {args.command}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericError, SingularKernelError) as exc:
        print(f"gdtm {args.command}: numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (PipelineError, CorpusFormatError, CheckpointError, SplitError, UnknownWordError, OSError) as exc:
        print(f"gdtm {args.command}: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except GDTMError as exc:
        print(f"gdtm {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
