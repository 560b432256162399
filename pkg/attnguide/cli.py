# Copyright 2020 The attnguide Authors
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
# http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

"""
Command-line entry point.

    attnguide gen-data lookup --seed 1 --out data/lookup
    attnguide train --data data/lookup --config experiments/lookup_guided.cfg --out runs/guided
    attnguide eval --checkpoint runs/guided/checkpoint --data data/lookup --split heldout_tables
    attnguide plot-attention --checkpoint runs/guided/checkpoint --data data/lookup --split heldout_tables --index 0 --out plots
    attnguide grid-search --space-file experiments/lookup_grid.cfg --data data/lookup --out runs/grid --parallel 4
    attnguide stats --data data/lookup

Exit codes: 0 success, 2 usage or configuration, 3 I/O or data, 4 numeric failure, 5 checkpoint/data mismatch.
"""

import argparse
import asyncio
import os
import sys
from typing import List, Optional

import numpy as np

from attnguide.errors import EXIT_IO, EXIT_OK, AttnGuideError, CompatibilityError, ConfigurationError, exit_code_for
from attnguide.manifest import RunManifest, dataset_checksums
from attnguide.model import Seq2SeqModel, make_batch
from attnguide.numerics import Tape
from attnguide.run_logger import RunLoggerFactory
from attnguide.tasks import (LookupTaskSpec, SymbolRewritingSpec, build_lookup_splits, build_sr_splits,
                             dataset_stats, format_stats, read_tsv, write_tsv)
from attnguide.training import (METRICS_HEADER, TrainConfig, Trainer, fit, grid_search, seed_streams,
                                split_run_config, write_metrics)
from attnguide.validation import ConfigSchemas, load_config_file, write_config_echo

OUTPUT_ROOT_ENV = "ATTNGUIDE_OUTPUT_ROOT"

STATS_FILE = "stats.csv"
EVAL_FILE = "eval.csv"


def output_root() -> str:
    return os.environ.get(OUTPUT_ROOT_ENV, ".")


def _int_list(text: str) -> List[int]:
    return [int(part) for part in text.split(",") if part.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="attnguide", description="Attention-guided sequence to sequence models")
    parser.add_argument('-q', '--quiet', action="store_true", help='Do not echo log records to stderr')
    commands = parser.add_subparsers(dest="command", required=True)

    gen = commands.add_parser("gen-data", help="Generate a dataset directory")
    gen.add_argument('task', choices=["lookup", "sr"], help='Task to generate')
    gen.add_argument('--seed', type=int, default=1, help='Generation seed')
    gen.add_argument('--out', help='Output directory')
    gen.add_argument('--heldout-inputs', type=int, default=2, help='Lookup: inputs held out per composition')
    gen.add_argument('--heldout-compositions', type=int, default=8, help='Lookup: compositions held out')
    gen.add_argument('--longer-lengths', type=_int_list, default=[], help='Lookup: extra composition lengths, e.g. 3,4,5')
    gen.add_argument('--longer-count', type=int, default=100, help='Lookup: examples per longer split')
    gen.add_argument('--train-size', type=int, default=10000, help='SR: train examples')
    gen.add_argument('--test-size', type=int, default=500, help='SR: examples per test split')
    gen.add_argument('--validation-size', type=int, default=1000, help='SR: validation examples')
    gen.add_argument('--full-scale', action="store_true", help='SR: 100000 train examples')

    train = commands.add_parser("train", help="Train a model")
    train.add_argument('--data', required=True, help='Dataset directory')
    train.add_argument('--config', help='Run config file (key = value lines)')
    train.add_argument('--out', help='Run directory')
    train.add_argument('--seed', type=int, help='Overrides the config seed')
    train.add_argument('--guidance', choices=["none", "learned", "oracle", "gumbel"], help='Overrides the config guidance')
    train.add_argument('--epochs', type=int, help='Overrides the config epochs')
    train.add_argument('--run-id', default="run", help='First column of the metrics rows')

    evaluate = commands.add_parser("eval", help="Evaluate a checkpoint")
    evaluate.add_argument('--checkpoint', required=True, help='Checkpoint directory')
    evaluate.add_argument('--data', required=True, help='Dataset directory')
    evaluate.add_argument('--split', action="append", help='Split to evaluate, repeatable; all splits by default')
    evaluate.add_argument('--out', help='Directory receiving eval.csv')
    evaluate.add_argument('--batch-size', type=int, default=64, help='Evaluation batch size')

    plot = commands.add_parser("plot-attention", help="Export the attention matrix of one example")
    plot.add_argument('--checkpoint', required=True, help='Checkpoint directory')
    plot.add_argument('--data', required=True, help='Dataset directory')
    plot.add_argument('--split', required=True, help='Split holding the example')
    plot.add_argument('--index', type=int, required=True, help='Example index within the split')
    plot.add_argument('--out', required=True, help='Output directory')

    grid = commands.add_parser("grid-search", help="Train every cell of a search space")
    grid.add_argument('--space-file', required=True, help='Space file, list values are searched over')
    grid.add_argument('--data', required=True, help='Dataset directory')
    grid.add_argument('--out', help='Output directory')
    grid.add_argument('--parallel', type=int, default=1, help='Worker processes')
    grid.add_argument('--runs-per-cell', type=int, default=1, help='Runs with distinct seeds per cell')

    stats = commands.add_parser("stats", help="Composition or length histograms of a dataset")
    stats.add_argument('--data', required=True, help='Dataset directory')
    return parser


def _default_out(args) -> Optional[str]:
    if getattr(args, "out", None):
        return args.out
    if args.command == "gen-data":
        return os.path.join(output_root(), f"data-{args.task}-seed{args.seed}")
    if args.command == "train":
        return os.path.join(output_root(), f"run-{args.run_id}")
    if args.command == "grid-search":
        return os.path.join(output_root(), "grid")
    return None


def _load_checkpoint(args):
    model = Seq2SeqModel.load(args.checkpoint)
    bundle = read_tsv(args.data)
    config = model.config
    if (config.source_vocab_size, config.target_vocab_size) != (len(bundle.source_vocab), len(bundle.target_vocab)):
        raise CompatibilityError(
            f"checkpoint vocabulary sizes {config.source_vocab_size}/{config.target_vocab_size} do not match "
            f"data vocabulary sizes {len(bundle.source_vocab)}/{len(bundle.target_vocab)}")
    return model, bundle


async def cmd_gen_data(args, logger, manifest: RunManifest):
    if args.task == "lookup":
        spec = LookupTaskSpec(seed=args.seed, heldout_inputs_per_composition=args.heldout_inputs,
                              heldout_composition_count=args.heldout_compositions,
                              longer_lengths=args.longer_lengths, longer_count=args.longer_count)
        bundle = build_lookup_splits(spec)
    else:
        spec = SymbolRewritingSpec(seed=args.seed, train_size=args.train_size, test_size=args.test_size,
                                   validation_size=args.validation_size, full_scale=args.full_scale)
        bundle = build_sr_splits(spec)
    manifest.config = spec.to_dict()
    manifest.seed = args.seed
    write_tsv(bundle, args.out)
    with open(os.path.join(args.out, STATS_FILE), "w", encoding="utf-8", newline="\n") as stats_file:
        stats_file.write(format_stats(dataset_stats(bundle)))
    manifest.dataset_checksums = dataset_checksums(args.out)
    await logger.info({"event": "dataset", "task": args.task, "out": args.out,
                       "splits": {name: len(examples) for name, examples in bundle.splits.items()}})


async def cmd_train(args, logger, manifest: RunManifest):
    bundle = read_tsv(args.data)
    values = load_config_file(args.config, ConfigSchemas.RUN_CONFIG) if args.config else {}
    for key in ("seed", "guidance", "epochs"):
        if getattr(args, key) is not None:
            values[key] = getattr(args, key)
    model_config, train_config = split_run_config(values, bundle)
    config = {**model_config.to_dict(), **train_config.to_dict()}
    manifest.config = config
    manifest.seed = train_config.seed
    manifest.dataset_checksums = dataset_checksums(args.data)
    manifest.write(args.out)
    write_config_echo(config, args.out)

    init_rng, train_rng = seed_streams(train_config.seed)
    model = Seq2SeqModel(model_config, init_rng)
    result = await fit(model, bundle, train_config, train_rng, logger=logger, out_dir=args.out, run_id=args.run_id)
    await logger.info({"event": "trained", "best_epoch": result.best_epoch,
                       "selection_split": train_config.selection_split,
                       "seq_acc": result.best_record.seq_accuracy})


async def cmd_eval(args, logger, manifest: Optional[RunManifest]):
    model, bundle = _load_checkpoint(args)
    if manifest is not None:
        manifest.config = model.config.to_dict()
        manifest.dataset_checksums = dataset_checksums(args.data)
    splits = args.split or list(bundle.splits)
    trainer = Trainer(model, TrainConfig(batch_size=args.batch_size), bundle.source_vocab, bundle.target_vocab,
                      np.random.default_rng(0))
    grammar = bundle.grammar() if bundle.task == "sr" else None
    records = []
    for split in splits:
        record = trainer.evaluate(bundle.split(split), split, run_id="eval", grammar=grammar)
        records.append(record)
        await logger.info({"event": "evaluation", **record._asdict()})
    print(METRICS_HEADER + ",grammar_acc")
    for record in records:
        print(record.csv_row(with_grammar=True))
    if args.out:
        write_metrics(records, os.path.join(args.out, EVAL_FILE), with_grammar=True)


def attention_pgm(matrix: np.ndarray) -> str:
    """
    ASCII grayscale image, one row per output step, one column per source position, 0 black, 255 white.
    """
    pixels = np.floor(255.0 * np.clip(matrix, 0.0, 1.0) + 0.5).astype(int)
    lines = ["P2", f"{matrix.shape[1]} {matrix.shape[0]}", "255"]
    lines.extend(" ".join(str(p) for p in row) for row in pixels)
    return "\n".join(lines) + "\n"


def attention_csv(matrix: np.ndarray) -> str:
    return "".join(",".join(repr(float(w)) for w in row) + "\n" for row in matrix)


async def cmd_plot_attention(args, logger, manifest: RunManifest):
    model, bundle = _load_checkpoint(args)
    examples = bundle.split(args.split)
    if not 0 <= args.index < len(examples):
        raise ConfigurationError(f"index {args.index} is outside split {args.split} of {len(examples)} examples")
    manifest.config = model.config.to_dict()
    manifest.dataset_checksums = dataset_checksums(args.data)
    example = examples[args.index]
    batch = make_batch([example], bundle.source_vocab, bundle.target_vocab)
    tape = Tape(record=False)
    decoded, traces = model.greedy_decode(tape, model.encode(tape, batch), bundle.target_vocab, batch=batch)
    matrix = np.stack([trace.attention.weights.value[0] for trace in traces])
    correct = tuple(bundle.target_vocab.decode(decoded[0])) == example.target
    stem = f"{args.split}_{args.index}_{'correct' if correct else 'incorrect'}"
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, stem + ".csv"), "w", encoding="utf-8", newline="\n") as csv_file:
        csv_file.write(attention_csv(matrix))
    with open(os.path.join(args.out, stem + ".pgm"), "w", encoding="ascii", newline="\n") as pgm_file:
        pgm_file.write(attention_pgm(matrix))
    await logger.info({"event": "attention", "file": stem, "steps": matrix.shape[0], "sources": matrix.shape[1]})


async def cmd_grid_search(args, logger, manifest: RunManifest):
    space = load_config_file(args.space_file, ConfigSchemas.GRID_SPACE)
    if args.parallel < 1:
        raise ConfigurationError(f"--parallel must be positive, got {args.parallel}")
    manifest.config = space
    manifest.dataset_checksums = dataset_checksums(args.data)
    manifest.write(args.out)
    rows = await grid_search(space, args.data, args.out, args.runs_per_cell, args.parallel, logger)
    failed = [row["run_id"] for row in rows if row["status"] != "ok"]
    await logger.info({"event": "grid_finished", "runs": len(rows), "failed": failed})


async def cmd_stats(args, logger, manifest):
    print(format_stats(dataset_stats(read_tsv(args.data))), end="")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "plot-attention": cmd_plot_attention,
    "grid-search": cmd_grid_search,
    "stats": cmd_stats
}


async def run_command(args, argv: List[str]) -> int:
    """
    Runs one subcommand with its logger and manifest and maps failures to exit codes.
    """
    args.out = _default_out(args)
    logger = RunLoggerFactory.get_logger(args.out, console=not args.quiet)
    manifest = RunManifest(args.command, ["attnguide", *argv]) if args.out else None
    code = EXIT_OK
    try:
        if manifest is not None:
            manifest.write(args.out)
        await COMMANDS[args.command](args, logger, manifest)
    except (AttnGuideError, OSError) as err:
        code = exit_code_for(err)
        print(f"attnguide: error: {err}", file=sys.stderr)
        await logger.error({"event": "failed", "command": args.command, "error": str(err), "exit_code": code})
    finally:
        if manifest is not None:
            manifest.finish(code)
            try:
                manifest.write(args.out)
            except OSError:
                code = code or EXIT_IO
        await logger.info({"event": "finished", "command": args.command, "exit_code": code})
        await logger.shutdown()
    return code


def main(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    return asyncio.run(run_command(args, argv))
