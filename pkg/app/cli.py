"""Command-line entry point: `python -m app.cli {train,eval,gradcheck,bench}`.

Exit codes: 0 success, 1 usage or configuration error, 2 data or format
error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from typing import List, Optional, Tuple

from app.rcrn.bench import run_bench
from app.rcrn.checkpoint import load_checkpoint, save_checkpoint
from app.rcrn.data import Dataset, gen_first_token_task, gen_random_label_task, load_tsv, load_word_vectors, write_tsv
from app.rcrn.errors import ConfigError, ContractError, DimensionError, FormatError, InputError, NumericalError
from app.rcrn.gradcheck import run_gradcheck
from app.rcrn.model import build_model, model_config
from app.rcrn.schema import RunConfig, load_run_config
from app.rcrn.train import evaluate, train_loop

logger = logging.getLogger("app.cli")

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"error: {message}\n")


def _datasets(run: RunConfig) -> Tuple[Dataset, Dataset]:
    if run.task == "first_token":
        train, dev = gen_first_token_task(run.n_train, run.n_test, run.seq_len, run.vocab_size, run.seed)
    elif run.task == "random_labels":
        train = gen_random_label_task(run.n_train, run.seq_len, run.vocab_size, run.seed)
        dev = train
    else:
        train = load_tsv(run.train_path)
        dev = load_tsv(run.dev_path, vocab=train.vocab.freeze(), label_names=train.label_names)
        return train, dev
    # synthetic sets are written out so `eval` can be pointed at them
    if run.train_path:
        write_tsv(train, run.train_path)
    if run.dev_path:
        write_tsv(dev, run.dev_path)
    return train, dev


def cmd_train(run: RunConfig) -> int:
    if run.task == "tsv":
        run.require("train_path", "dev_path")
    run.require("checkpoint_path")
    train, dev = _datasets(run)
    embedding = None
    embed_dim = None
    if run.embed_path:
        embedding = load_word_vectors(run.embed_path, train.vocab, seed=run.seed, precision=run.precision)
        embed_dim = embedding.dim
    model = build_model(model_config(run, len(train.vocab), train.class_count, embed_dim), train.vocab, train.label_names, embedding)
    logger.info(
        "training %s/%s d=%d: %d parameters, %d train / %d dev examples",
        run.encoder_kind,
        run.atom,
        run.hidden_dim,
        model.param_count(),
        len(train),
        len(dev),
    )
    metrics_path = run.metrics_path or f"{run.checkpoint_path}.metrics.csv"
    result = train_loop(model, run.train_settings(), train, dev, run.checkpoint_path, metrics_path)
    save_checkpoint(result.model, run.checkpoint_path)
    dev_acc = result.history[-1].dev_acc if result.history else evaluate(result.model, dev)
    print(f"dev accuracy: {dev_acc:.4f}")
    return EXIT_OK


def cmd_eval(checkpoint: str, data: str) -> int:
    model = load_checkpoint(checkpoint)
    dataset = load_tsv(data, vocab=model.vocab, label_names=model.label_names)
    print(f"accuracy: {evaluate(model, dataset):.4f}")
    return EXIT_OK


def cmd_gradcheck(run: RunConfig, inject_fault: Optional[str] = None) -> int:
    report = run_gradcheck(run, inject_fault)
    for line in report.lines():
        print(line)
    if not report.passed:
        groups = ", ".join(r.group for r in report.failures)
        raise NumericalError(f"gradient check failed for: {groups}")
    return EXIT_OK


def cmd_bench(run: RunConfig, out: Optional[str] = None) -> int:
    report = run_bench(run.bench_settings())
    if out:
        report.write(out)
        logger.info("wrote %d bench rows to %s", len(report.rows), out)
    else:
        sys.stdout.write(report.to_csv())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rcrn", description="Recurrently controlled recurrent networks for text classification.")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a classifier and write a checkpoint")
    p.add_argument("--config", required=True)

    p = sub.add_parser("eval", help="accuracy of a checkpoint on a TSV file")
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--config", help="take checkpoint_path and dev_path from a run config")

    p = sub.add_parser("gradcheck", help="finite-difference check of every parameter group")
    p.add_argument("--config", required=True)
    p.add_argument("--inject-fault", metavar="GROUP", help="skew one group's analytic gradient")

    p = sub.add_parser("bench", help="time encoder variants across sequence lengths")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="CSV path; stdout when omitted")
    return parser


def _dispatch(args: argparse.Namespace) -> int:
    if args.command == "eval":
        checkpoint, data = args.checkpoint, args.data
        if args.config:
            run = load_run_config(args.config)
            checkpoint = checkpoint or run.checkpoint_path
            data = data or run.dev_path
        if not checkpoint:
            raise ConfigError("missing key: checkpoint_path")
        if not data:
            raise ConfigError("missing key: dev_path")
        return cmd_eval(checkpoint, data)
    run = load_run_config(args.config)
    if args.command == "train":
        return cmd_train(run)
    if args.command == "gradcheck":
        return cmd_gradcheck(run, args.inject_fault)
    return cmd_bench(run, args.out)


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args)
    except (ConfigError, ContractError, DimensionError) as exc:
        code, msg = EXIT_CONFIG, str(exc)
    except (InputError, FormatError, OSError) as exc:
        code, msg = EXIT_DATA, str(exc)
    except NumericalError as exc:
        code, msg = EXIT_NUMERICAL, str(exc)
    print(f"error: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
