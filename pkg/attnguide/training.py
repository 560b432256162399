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
Losses, the training loop, evaluation, model selection and grid search.
"""

import asyncio
import concurrent.futures
import os
from itertools import product
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from attnguide.errors import EXIT_OK, ConfigurationError, NumericError, exit_code_for
from attnguide.manifest import RunManifest, dataset_checksums
from attnguide.model import (Batch, GuidanceKind, ModelConfig, Seq2SeqModel, StepTrace, count_parameters,
                             make_batch)
from attnguide.numerics import NumArray, Tape, Tensor, adam_step, clip_grad_norm
from attnguide.tasks import DatasetBundle, Example, Grammar, Vocabulary, grammar_consistent, read_tsv
from attnguide.validation import ConfigSchemas, validate_document, write_config_echo

METRICS_HEADER = "run_id,split,epoch,task_loss,ag_loss,seq_acc,token_acc,attn_acc"
METRICS_FILE = "metrics.csv"
CHECKPOINT_DIR = "checkpoint"
RESULTS_FILE = "results.csv"

DEFAULT_SELECTION_SPLIT = {"lookup": "heldout_inputs", "sr": "validation"}


class TrainConfig:
    """
    Optimization settings of one run. selection_split None picks the task's default
    (heldout_inputs for lookup, validation for symbol rewriting).
    """

    KEYS = ("batch_size", "learning_rate", "epochs", "seed", "lambda_task", "lambda_ag", "selection_split",
            "eval_every", "clip_norm")

    def __init__(self, batch_size: int = 64, learning_rate: float = 0.001, epochs: int = 100, seed: int = 1,
                 lambda_task: float = 1.0, lambda_ag: float = 1.0, selection_split: Optional[str] = None,
                 eval_every: int = 1, clip_norm: Optional[float] = None):
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.seed = seed
        self.lambda_task = lambda_task
        self.lambda_ag = lambda_ag
        self.selection_split = selection_split
        self.eval_every = eval_every
        self.clip_norm = clip_norm

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = {key: value for key, value in data.items() if value is not None or key == "clip_norm"}
        validate_document(data, ConfigSchemas.TRAIN_CONFIG)
        return cls(**data)

    def to_dict(self) -> dict:
        return {key: getattr(self, key) for key in self.KEYS}


def split_run_config(values: dict, bundle: DatasetBundle) -> Tuple[ModelConfig, TrainConfig]:
    """
    Splits a run config into its model and training halves. Vocabulary sizes come from the data.
    """
    validate_document(dict(values), ConfigSchemas.RUN_CONFIG)
    train_values = {key: value for key, value in values.items() if key in TrainConfig.KEYS}
    model_values = {key: value for key, value in values.items() if key not in TrainConfig.KEYS}
    model_values.setdefault("embedding_size", 16)
    model_values.setdefault("hidden_size", 64)
    model_values["source_vocab_size"] = len(bundle.source_vocab)
    model_values["target_vocab_size"] = len(bundle.target_vocab)
    model_config = ModelConfig.from_dict(model_values)
    train_config = TrainConfig.from_dict(train_values)
    if train_config.selection_split is None:
        train_config.selection_split = DEFAULT_SELECTION_SPLIT[bundle.task]
    return model_config, train_config


def ag_active(model_config: ModelConfig, train_config: TrainConfig) -> bool:
    return model_config.guidance in GuidanceKind.WITH_AG_TARGETS and train_config.lambda_ag > 0


def check_guidance(model_config: ModelConfig, train_config: TrainConfig, bundle: DatasetBundle):
    """
    Rejects configurations whose guidance cannot be honoured by the data or the loss weights.
    """
    if model_config.guidance == GuidanceKind.LEARNED and train_config.lambda_ag == 0:
        raise ConfigurationError("learned guidance needs lambda_ag > 0")
    if model_config.guidance in GuidanceKind.WITH_AG_TARGETS and not bundle.has_ag_targets("train"):
        raise ConfigurationError(f"{model_config.guidance} guidance needs AG targets in the train split")
    if train_config.selection_split not in bundle.splits:
        raise ConfigurationError(f"selection split {train_config.selection_split} is not in the data")


def seed_streams(seed: int) -> Tuple[np.random.Generator, np.random.Generator]:
    """
    Independent (initialization, training) generators derived from one seed.
    """
    init_seq, train_seq = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(init_seq), np.random.default_rng(train_seq)


# ---------------------------------------------------------------------------------------------- losses


def _sum(tape: Tape, terms: Sequence[Tensor]) -> Tensor:
    total = terms[0]
    for term in terms[1:]:
        total = tape.add(total, term)
    return total


def task_loss(tape: Tape, traces: Sequence[StepTrace], batch: Batch) -> Tensor:
    """
    Token NLL averaged over each example's steps (EOS included), then over the batch.
    """
    lengths = batch.target_mask.sum(axis=1)
    terms = []
    for t, trace in enumerate(traces):
        weights = batch.target_mask[:, t] / (lengths * batch.size)
        terms.append(tape.weighted_sum(tape.nll_loss(trace.log_probs, batch.targets[:, t]), weights))
    return _sum(tape, terms)


def ag_loss(tape: Tape, traces: Sequence[StepTrace], batch: Batch) -> Tensor:
    """
    (1/T) sum_t -log a_t[target_t] per example with T the number of non-EOS steps, averaged over
    the batch. Uses the computed attention rows, so it also trains oracle models.
    """
    if not batch.has_ag:
        raise ConfigurationError("the AG loss needs AG targets")
    lengths = batch.ag_mask.sum(axis=1)
    terms = []
    for t, trace in enumerate(traces):
        if not batch.ag_mask[:, t].any():
            continue
        picked = tape.select(trace.computed_attention.weights, batch.ag[:, t])
        weights = -batch.ag_mask[:, t] / (np.maximum(lengths, 1.0) * batch.size)
        terms.append(tape.weighted_sum(tape.clamped_log(picked), weights))
    return _sum(tape, terms)


def combined_loss(tape: Tape, traces: Sequence[StepTrace], batch: Batch, lambda_task: float = 1.0,
                  lambda_ag: float = 1.0, use_ag: bool = True) -> Tuple[Tensor, Tensor, Optional[Tensor]]:
    """
    lambda_task * task_loss + lambda_ag * ag_loss.

    Returns:
        tuple: (total, task term, AG term or None when the AG term is off)
    """
    task = task_loss(tape, traces, batch)
    if not use_ag or lambda_ag == 0:
        return tape.scale(task, lambda_task), task, None
    guided = ag_loss(tape, traces, batch)
    return tape.add(tape.scale(task, lambda_task), tape.scale(guided, lambda_ag)), task, guided


def per_example_task_loss(traces: Sequence[StepTrace], batch: Batch) -> NumArray:
    """
    Each example's mean token NLL, computed from recorded values.
    """
    nll = np.stack([
        -np.take_along_axis(trace.log_probs.value, batch.targets[:, t, None], axis=-1)[:, 0]
        for t, trace in enumerate(traces)
    ], axis=1)
    return (nll * batch.target_mask).sum(axis=1) / batch.target_mask.sum(axis=1)


# ---------------------------------------------------------------------------------------------- metrics


class MetricsRecord(NamedTuple):
    run_id: str
    split: str
    epoch: int
    task_loss: float
    ag_loss: float
    seq_accuracy: float
    token_accuracy: float
    attn_accuracy: float
    grammar_accuracy: Optional[float] = None

    def csv_row(self, with_grammar: bool = False) -> str:
        fields = [self.run_id, self.split, str(self.epoch)]
        fields += [repr(float(v)) for v in (self.task_loss, self.ag_loss, self.seq_accuracy,
                                            self.token_accuracy, self.attn_accuracy)]
        if with_grammar:
            fields.append("" if self.grammar_accuracy is None else repr(float(self.grammar_accuracy)))
        return ",".join(fields)


class EpochResult(NamedTuple):
    epoch: int
    task_loss: float
    ag_loss: float


class FitResult(NamedTuple):
    best_epoch: int
    best_record: MetricsRecord
    best_state: Dict[str, NumArray]
    history: List[MetricsRecord]
    epochs: List[EpochResult]


def _batches(examples: Sequence[Example], size: int) -> List[Sequence[Example]]:
    return [examples[i:i + size] for i in range(0, len(examples), size)]


class Trainer:
    """
    Runs training epochs and evaluations for one model with one training configuration.
    """

    def __init__(self, model: Seq2SeqModel, config: TrainConfig, source_vocab: Vocabulary, target_vocab: Vocabulary,
                 rng: np.random.Generator):
        """
        Args:
            model (Seq2SeqModel): model updated in place
            config (TrainConfig): optimization settings
            source_vocab (Vocabulary): source side of the data
            target_vocab (Vocabulary): target side of the data
            rng (numpy.random.Generator): shuffling and Gumbel noise stream
        """
        self.model = model
        self.config = config
        self.source_vocab = source_vocab
        self.target_vocab = target_vocab
        self.rng = rng
        self.use_ag = ag_active(model.config, config)

    def _batch(self, examples: Sequence[Example], use_ag: bool) -> Batch:
        return make_batch(examples, self.source_vocab, self.target_vocab, use_ag=use_ag)

    def _reads_ag(self) -> bool:
        return self.use_ag or self.model.config.guidance == GuidanceKind.ORACLE

    def train_epoch(self, examples: Sequence[Example], epoch: int = 0) -> EpochResult:
        """
        One pass over the shuffled examples with an Adam step per batch.

        Returns:
            EpochResult: example-weighted mean task and AG losses
        """
        config = self.config
        params = self.model.params
        order = self.rng.permutation(len(examples))
        shuffled = [examples[int(i)] for i in order]
        task_sum = ag_sum = 0.0
        for index, chunk in enumerate(_batches(shuffled, config.batch_size)):
            batch = self._batch(chunk, self._reads_ag())
            tape = Tape()
            try:
                enc = self.model.encode(tape, batch)
                traces = self.model.decode_teacher_forced(tape, enc, batch, rng=self.rng)
                total, task, guided = combined_loss(tape, traces, batch, config.lambda_task, config.lambda_ag,
                                                    self.use_ag)
                tape.backward(total)
                if config.clip_norm is not None:
                    clip_grad_norm(params, config.clip_norm)
                adam_step(params, config.learning_rate)
            except NumericError as err:
                raise NumericError(f"epoch {epoch} batch {index}: {err}") from err
            finally:
                params.zero_grad()
            task_sum += float(task.value) * batch.size
            ag_sum += (float(guided.value) if guided is not None else 0.0) * batch.size
        n = max(len(examples), 1)
        return EpochResult(epoch, task_sum / n, ag_sum / n)

    def example_losses(self, examples: Sequence[Example]) -> NumArray:
        """
        Per-example task loss of one padded batch holding all examples.
        """
        batch = self._batch(examples, self.model.config.guidance == GuidanceKind.ORACLE)
        tape = Tape(record=False)
        traces = self.model.decode_teacher_forced(tape, self.model.encode(tape, batch), batch)
        return per_example_task_loss(traces, batch)

    def evaluate(self, examples: Sequence[Example], split: str, epoch: int = 0, run_id: str = "",
                 grammar: Optional[Grammar] = None) -> MetricsRecord:
        """
        Greedy sequence accuracy, teacher-forced token accuracy and losses, and the rate at which
        the attention row feeding the context vector peaks on the AG target. AG-based numbers
        are 0 when the split has no AG targets. Gumbel noise is never applied.
        """
        model = self.model
        task_sum = ag_sum = 0.0
        seq_hits = grammar_hits = 0
        token_hits = token_total = 0.0
        attn_hits = attn_total = 0.0
        for chunk in _batches(list(examples), self.config.batch_size):
            batch = self._batch(chunk, True)
            tape = Tape(record=False)
            enc = model.encode(tape, batch)
            traces = model.decode_teacher_forced(tape, enc, batch)
            task_sum += float(task_loss(tape, traces, batch).value) * batch.size
            if batch.has_ag:
                ag_sum += float(ag_loss(tape, traces, batch).value) * batch.size
            for t, trace in enumerate(traces):
                predicted = np.argmax(trace.log_probs.value, axis=-1)
                token_hits += float(((predicted == batch.targets[:, t]) * batch.target_mask[:, t]).sum())
                token_total += float(batch.target_mask[:, t].sum())
                if batch.has_ag:
                    peak = np.argmax(trace.attention.weights.value, axis=-1)
                    attn_hits += float(((peak == batch.ag[:, t]) * batch.ag_mask[:, t]).sum())
                    attn_total += float(batch.ag_mask[:, t].sum())

            decoded, _ = model.greedy_decode(tape, enc, self.target_vocab, batch=batch)
            for example, ids in zip(chunk, decoded):
                tokens = self.target_vocab.decode(ids)
                seq_hits += tuple(tokens) == example.target
                if grammar is not None:
                    grammar_hits += grammar_consistent(example.source, tokens, grammar)
        n = max(len(examples), 1)
        return MetricsRecord(
            run_id, split, epoch, task_sum / n, ag_sum / n, seq_hits / n,
            token_hits / max(token_total, 1.0), attn_hits / max(attn_total, 1.0),
            grammar_hits / n if grammar is not None else None)


def _better(record: MetricsRecord, best: Optional[MetricsRecord]) -> bool:
    # ties on accuracy go to the lower task loss, remaining ties to the earlier epoch
    if best is None:
        return True
    if record.seq_accuracy != best.seq_accuracy:
        return record.seq_accuracy > best.seq_accuracy
    return record.task_loss < best.task_loss


def write_metrics(records: Sequence[MetricsRecord], path: str, with_grammar: bool = False):
    header = METRICS_HEADER + (",grammar_acc" if with_grammar else "")
    with open(path, "w", encoding="utf-8", newline="\n") as metrics_file:
        metrics_file.write(header + "\n")
        metrics_file.writelines(record.csv_row(with_grammar) + "\n" for record in records)


async def fit(model: Seq2SeqModel, bundle: DatasetBundle, config: TrainConfig, rng: np.random.Generator,
              logger=None, out_dir: Optional[str] = None, run_id: str = "") -> FitResult:
    """
    Trains for config.epochs epochs, evaluating every split every eval_every epochs (and after the
    last one). The model keeps the parameters of the best evaluation on the selection split.

    Args:
        model (Seq2SeqModel): model to train
        bundle (DatasetBundle): data; its train split is trained on
        config (TrainConfig): optimization settings
        rng (numpy.random.Generator): training stream
        logger (JsonLogger, optional): receives epoch and evaluation events
        out_dir (str, optional): receives metrics.csv and the best checkpoint
        run_id (str, optional): first column of every metrics row

    Returns:
        FitResult
    """
    check_guidance(model.config, config, bundle)
    trainer = Trainer(model, config, bundle.source_vocab, bundle.target_vocab, rng)
    grammar = bundle.grammar() if bundle.task == "sr" else None
    history: List[MetricsRecord] = []
    epochs: List[EpochResult] = []
    best: Optional[MetricsRecord] = None
    best_state = model.params.state()
    for epoch in range(1, config.epochs + 1):
        result = trainer.train_epoch(bundle.split("train"), epoch)
        epochs.append(result)
        if logger:
            await logger.info({"event": "epoch", "run_id": run_id, "epoch": epoch,
                               "task_loss": result.task_loss, "ag_loss": result.ag_loss})
        if epoch % config.eval_every and epoch != config.epochs:
            continue
        for split, examples in bundle.splits.items():
            record = trainer.evaluate(examples, split, epoch, run_id, grammar)
            history.append(record)
            if logger:
                await logger.info({"event": "evaluation", **record._asdict()})
            if split == config.selection_split and _better(record, best):
                best = record
                best_state = model.params.state()
                if logger:
                    await logger.info({"event": "best", "run_id": run_id, "epoch": epoch,
                                       "seq_acc": record.seq_accuracy})
    model.params.load_state(best_state)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        write_metrics(history, os.path.join(out_dir, METRICS_FILE), with_grammar=bundle.task == "sr")
        model.save(os.path.join(out_dir, CHECKPOINT_DIR))
    return FitResult(best.epoch, best, best_state, history, epochs)


# ---------------------------------------------------------------------------------------------- grid search


def expand_space(space: dict) -> List[dict]:
    """
    Cartesian product over every key holding a list; scalar keys are shared by all cells.
    """
    validate_document(dict(space), ConfigSchemas.GRID_SPACE)
    keys = list(space)
    axes = [space[key] if isinstance(space[key], list) else [space[key]] for key in keys]
    return [dict(zip(keys, values)) for values in product(*axes)]


RESULT_CONFIG_KEYS = ("embedding_size", "hidden_size", "alignment", "mechanism", "guidance", "seed")


async def train_cell(data_dir: str, run_config: dict, run_id: str, run_dir: str) -> dict:
    """
    Trains one grid run and summarizes it as a results row. Failures become a row too.

    The run directory receives the same files as a train run: manifest.json, config.cfg,
    metrics.csv and checkpoint/.
    """
    row = {"run_id": run_id, "status": "ok"}
    row.update({key: run_config.get(key, "") for key in RESULT_CONFIG_KEYS})
    manifest = RunManifest("grid-search", ["attnguide", "grid-search", "--data", data_dir,
                                           "--out", os.path.dirname(run_dir)],
                           config=dict(run_config), seed=run_config.get("seed"))
    code = EXIT_OK
    try:
        bundle = read_tsv(data_dir)
        model_config, train_config = split_run_config(run_config, bundle)
        config = {**model_config.to_dict(), **train_config.to_dict()}
        manifest.config = config
        manifest.seed = train_config.seed
        manifest.dataset_checksums = dataset_checksums(data_dir)
        manifest.write(run_dir)
        write_config_echo(config, run_dir)

        init_rng, train_rng = seed_streams(train_config.seed)
        model = Seq2SeqModel(model_config, init_rng)
        result = await fit(model, bundle, train_config, train_rng, out_dir=run_dir, run_id=run_id)
        row["parameters"] = count_parameters(model_config)
        row["best_epoch"] = result.best_epoch
        for record in result.history:
            if record.epoch == result.best_epoch:
                row[f"{record.split}_seq_acc"] = record.seq_accuracy
                row[f"{record.split}_attn_acc"] = record.attn_accuracy
                if record.grammar_accuracy is not None:
                    row[f"{record.split}_grammar_acc"] = record.grammar_accuracy
    except Exception as err:
        row["status"] = f"failed: {err}"
        code = exit_code_for(err)
    manifest.finish(code)
    try:
        manifest.write(run_dir)
    except OSError as err:
        row["status"] = f"failed: {err}"
    return row


def run_cell_process(data_dir: str, run_config: dict, run_id: str, run_dir: str) -> dict:
    return asyncio.run(train_cell(data_dir, run_config, run_id, run_dir))


def write_results(rows: Sequence[dict], path: str):
    columns = ["run_id", "status", *RESULT_CONFIG_KEYS, "parameters", "best_epoch"]
    for row in rows:
        columns.extend(key for key in row if key not in columns)
    with open(path, "w", encoding="utf-8", newline="\n") as results_file:
        results_file.write(",".join(columns) + "\n")
        for row in rows:
            values = [row.get(column, "") for column in columns]
            results_file.write(",".join(repr(v) if isinstance(v, float) else str(v).replace(",", ";")
                                        for v in values) + "\n")


async def grid_search(space: dict, data_dir: str, out_dir: str, runs_per_cell: int = 1, parallel: int = 1,
                      logger=None) -> List[dict]:
    """
    Trains every cell of the space runs_per_cell times. Run r of a cell uses seed base + r, where
    base is the space's seed (default 1). Rows are ordered by run id; with parallel > 1 runs
    execute in a process pool.

    Returns:
        list: one results row per run
    """
    cells = expand_space(space)
    if runs_per_cell < 1:
        raise ConfigurationError(f"runs per cell must be positive, got {runs_per_cell}")
    jobs = []
    for c, cell in enumerate(cells):
        base_seed = cell.get("seed", 1)
        for r in range(runs_per_cell):
            run_id = f"{c:03d}-{r:02d}"
            jobs.append((data_dir, {**cell, "seed": base_seed + r}, run_id, os.path.join(out_dir, run_id)))
    if logger:
        await logger.info({"event": "grid_started", "cells": len(cells), "runs": len(jobs)})

    if parallel > 1:
        loop = asyncio.get_running_loop()
        with concurrent.futures.ProcessPoolExecutor(max_workers=parallel) as pool:
            rows = await asyncio.gather(*(loop.run_in_executor(pool, run_cell_process, *job) for job in jobs))
    else:
        rows = []
        for job in jobs:
            rows.append(await train_cell(*job))
    rows = sorted(rows, key=lambda row: row["run_id"])
    if logger:
        for row in rows:
            await logger.info({"event": "grid_run", "run_id": row["run_id"], "status": row["status"]})
    os.makedirs(out_dir, exist_ok=True)
    write_results(rows, os.path.join(out_dir, RESULTS_FILE))
    return rows
