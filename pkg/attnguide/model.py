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
GRU encoder-decoder with dot or MLP attention, three attention placements and four guidance
modes. A forward pass runs over a padded batch; a single example is a batch of one.

Parameter names:
    encoder.embedding                 [V_src x E]
    encoder.gru.{W,U,b}_{z,r,h}       W [H x E], U [H x H], b [H]
    decoder.embedding                 [V_tgt x E]
    decoder.gru.{W,U,b}_{z,r,h}       W [H x I], I = E + H (pre_rnn), H (full_focus), E (post_rnn)
    attention.W_c, attention.W_s      [H x 2H], [H]          (mlp alignment)
    attention.W_f                     [H x (E + H)]          (full_focus)
    output.W_o                        [V_tgt x 2H] for post_rnn, [V_tgt x H] otherwise
"""

import os
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from attnguide.attention import (AlignmentKind, AttentionRow, MechanismKind, attend, context_vector,
                                 full_focus_input, post_rnn_output, pre_rnn_input)
from attnguide.errors import ConfigurationError, DataError
from attnguide.numerics import GRUParams, NumArray, ParameterStore, Tape, Tensor, constant, uniform_init
from attnguide.tasks import EOS, SOS, Example, Vocabulary
from attnguide.validation import ConfigSchemas, coerce_value, format_value, string_keys, validate_document

CHECKPOINT_MANIFEST = "checkpoint.txt"
CHECKPOINT_DATA = "checkpoint.bin"

GATES = ("z", "r", "h")


class GuidanceKind:
    """
    How attention is supervised or replaced
    """
    NONE = "none"
    LEARNED = "learned"
    ORACLE = "oracle"
    GUMBEL = "gumbel"

    ALL = (NONE, LEARNED, ORACLE, GUMBEL)
    WITH_AG_TARGETS = (LEARNED, ORACLE)


class ModelConfig:
    """
    Architecture of one model. Loss weights live in the training config.
    """

    DEFAULTS = {
        "cell": "gru",
        "alignment": AlignmentKind.MLP,
        "mechanism": MechanismKind.PRE_RNN,
        "guidance": GuidanceKind.LEARNED,
        "gumbel_temperature": 1.0,
        "max_decode_length": 50,
        "init_range": 0.08
    }

    KEYS = ("cell", "embedding_size", "hidden_size", "alignment", "mechanism", "guidance", "gumbel_temperature",
            "source_vocab_size", "target_vocab_size", "max_decode_length", "init_range")

    def __init__(self, embedding_size: int, hidden_size: int, source_vocab_size: int, target_vocab_size: int,
                 cell: str = "gru", alignment: str = AlignmentKind.MLP, mechanism: str = MechanismKind.PRE_RNN,
                 guidance: str = GuidanceKind.LEARNED, gumbel_temperature: float = 1.0,
                 max_decode_length: int = 50, init_range: float = 0.08):
        self.cell = cell
        self.embedding_size = embedding_size
        self.hidden_size = hidden_size
        self.alignment = alignment
        self.mechanism = mechanism
        self.guidance = guidance
        self.gumbel_temperature = gumbel_temperature
        self.source_vocab_size = source_vocab_size
        self.target_vocab_size = target_vocab_size
        self.max_decode_length = max_decode_length
        self.init_range = init_range
        validate_document(self.to_dict(), ConfigSchemas.MODEL_CONFIG)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        validate_document(dict(data), ConfigSchemas.MODEL_CONFIG)
        return cls(**data)

    def to_dict(self) -> dict:
        return {key: getattr(self, key) for key in self.KEYS}

    def replace(self, **changes) -> "ModelConfig":
        data = self.to_dict()
        data.update(changes)
        return ModelConfig.from_dict(data)

    def __eq__(self, other):
        return isinstance(other, ModelConfig) and self.to_dict() == other.to_dict()

    def __repr__(self):
        return f"ModelConfig({self.to_dict()})"

    @property
    def decoder_input_size(self) -> int:
        if self.mechanism == MechanismKind.PRE_RNN:
            return self.embedding_size + self.hidden_size
        if self.mechanism == MechanismKind.FULL_FOCUS:
            return self.hidden_size
        return self.embedding_size


def parameter_shapes(config: ModelConfig) -> List[Tuple[str, Tuple[int, ...]]]:
    """
    Name and shape of every parameter, in checkpoint order.
    """
    E, H = config.embedding_size, config.hidden_size
    shapes = [("encoder.embedding", (config.source_vocab_size, E))]
    for prefix, width in (("encoder.gru", E), ("decoder.gru", config.decoder_input_size)):
        if prefix == "decoder.gru":
            shapes.append(("decoder.embedding", (config.target_vocab_size, E)))
        for gate in GATES:
            shapes.append((f"{prefix}.W_{gate}", (H, width)))
            shapes.append((f"{prefix}.U_{gate}", (H, H)))
            shapes.append((f"{prefix}.b_{gate}", (H,)))
    if config.alignment == AlignmentKind.MLP:
        shapes.append(("attention.W_c", (H, 2 * H)))
        shapes.append(("attention.W_s", (H,)))
    if config.mechanism == MechanismKind.FULL_FOCUS:
        shapes.append(("attention.W_f", (H, E + H)))
    output_width = 2 * H if config.mechanism == MechanismKind.POST_RNN else H
    shapes.append(("output.W_o", (config.target_vocab_size, output_width)))
    return shapes


def count_parameters(config: ModelConfig) -> int:
    """
    Number of scalar parameters:
        V_src E + V_tgt E + 3 (H E + H^2 + H) + 3 (H I + H^2 + H) + V_tgt O
        + (2 H^2 + H if mlp) + (H (E + H) if full_focus)
    with I the decoder input size and O = 2H for post_rnn, H otherwise.
    """
    E, H = config.embedding_size, config.hidden_size
    total = (config.source_vocab_size + config.target_vocab_size) * E
    total += 3 * (H * E + H * H + H) + 3 * (H * config.decoder_input_size + H * H + H)
    total += config.target_vocab_size * (2 * H if config.mechanism == MechanismKind.POST_RNN else H)
    if config.alignment == AlignmentKind.MLP:
        total += 2 * H * H + H
    if config.mechanism == MechanismKind.FULL_FOCUS:
        total += H * (E + H)
    return total


class Batch(NamedTuple):
    """
    A right-padded batch. Decoder step t (0-based) reads dec_inputs[:, t] and predicts targets[:, t].
    ag holds one source index per step including the EOS step, which reuses the last index.
    ag_mask marks real steps that carry an AG target, excluding EOS.
    """
    source_ids: NumArray
    source_mask: NumArray
    dec_inputs: NumArray
    targets: NumArray
    target_mask: NumArray
    ag: NumArray
    ag_mask: NumArray
    ag_lengths: NumArray
    has_ag: bool

    @property
    def size(self) -> int:
        return self.source_ids.shape[0]

    def oracle_indices(self, step: int) -> NumArray:
        """
        AG index of every example at the given step, holding each example's last index past its end.
        """
        columns = np.minimum(step, self.ag_lengths - 1)
        return self.ag[np.arange(self.size), columns]


def make_batch(examples: Sequence[Example], source_vocab: Vocabulary, target_vocab: Vocabulary,
               use_ag: bool = True) -> Batch:
    """
    Encodes and pads examples. The target gets EOS appended and the decoder input is SOS
    followed by the target shifted right. AG targets are read only when use_ag is True.
    """
    if not examples:
        raise ConfigurationError("cannot build an empty batch")
    size = len(examples)
    sources = [source_vocab.encode(ex.source) for ex in examples]
    targets = [target_vocab.encode(ex.target) + [target_vocab.index(EOS)] for ex in examples]
    n_source = max(len(s) for s in sources)
    n_target = max(len(t) for t in targets)
    if min(len(s) for s in sources) < 1:
        raise DataError("every source needs at least one token")

    source_ids = np.zeros((size, n_source), dtype=np.int64)
    source_mask = np.zeros((size, n_source), dtype=bool)
    dec_inputs = np.zeros((size, n_target), dtype=np.int64)
    target_ids = np.zeros((size, n_target), dtype=np.int64)
    target_mask = np.zeros((size, n_target))
    ag = np.zeros((size, n_target), dtype=np.int64)
    ag_mask = np.zeros((size, n_target))
    ag_lengths = np.ones(size, dtype=np.int64)
    has_ag = use_ag and all(len(ex.ag_target) == len(ex.target) for ex in examples)

    sos = target_vocab.index(SOS)
    for b, (example, source, target) in enumerate(zip(examples, sources, targets)):
        source_ids[b, :len(source)] = source
        source_mask[b, :len(source)] = True
        target_ids[b, :len(target)] = target
        target_mask[b, :len(target)] = 1.0
        dec_inputs[b, :len(target)] = [sos] + target[:-1]
        if has_ag:
            indices = list(example.ag_target) + [example.ag_target[-1]]
            ag[b, :len(indices)] = indices
            ag_mask[b, :len(example.ag_target)] = 1.0
            ag_lengths[b] = len(indices)
    return Batch(source_ids, source_mask, dec_inputs, target_ids, target_mask, ag, ag_mask, ag_lengths, has_ag)


class EncoderResult(NamedTuple):
    outputs: Tensor
    final_state: Tensor
    source_mask: NumArray


class StepTrace(NamedTuple):
    """
    One decoder step. attention is the row that fed the context vector; computed_attention is
    the row the model computed, which differs from attention only under oracle guidance.
    """
    log_probs: Tensor
    attention: AttentionRow
    decoder_state: Tensor
    computed_attention: AttentionRow


class Seq2SeqModel:
    """
    Encoder-decoder holding its configuration and parameters.
    """

    def __init__(self, config: ModelConfig, rng: Optional[np.random.Generator] = None):
        """
        Args:
            config (ModelConfig): architecture
            rng (numpy.random.Generator, optional): initialization stream. Parameters are zero when omitted.
        """
        self.config = config
        self.params = ParameterStore()
        for name, shape in parameter_shapes(config):
            if rng is None:
                value = np.zeros(shape)
            else:
                value = uniform_init(shape, rng, -config.init_range, config.init_range)
            self.params.add(name, value)

    def _gru(self, prefix: str) -> GRUParams:
        return GRUParams(*(self.params[f"{prefix}.{kind}_{gate}"] for gate in GATES for kind in "WUb"))

    def encode(self, tape: Tape, batch: Batch) -> EncoderResult:
        """
        Runs the encoder GRU left to right. States are held over padding so the final state is
        the state after the last real token.
        """
        gru = self._gru("encoder.gru")
        table = self.params["encoder.embedding"]
        state = constant(np.zeros((batch.size, self.config.hidden_size)))
        outputs = []
        for i in range(batch.source_ids.shape[1]):
            x = tape.embedding(table, batch.source_ids[:, i])
            state = tape.blend(tape.gru_cell(x, state, gru), state, batch.source_mask[:, i])
            outputs.append(state)
        return EncoderResult(tape.stack(outputs), state, batch.source_mask)

    def _step(self, tape: Tape, enc: EncoderResult, state: Tensor, token_ids: NumArray, step: int,
              oracle: Optional[NumArray], rng: Optional[np.random.Generator]) -> StepTrace:
        config = self.config
        params = self.params
        mlp = config.alignment == AlignmentKind.MLP
        W_c = params["attention.W_c"] if mlp else None
        W_s = params["attention.W_s"] if mlp else None
        temperature = config.gumbel_temperature if rng is not None and config.guidance == GuidanceKind.GUMBEL else None
        de = tape.embedding(params["decoder.embedding"], token_ids)
        gru = self._gru("decoder.gru")

        def attention_for(query: Tensor, query_state: int) -> Tuple[AttentionRow, AttentionRow]:
            computed = attend(tape, enc.outputs, query, config.alignment, enc.source_mask, query_state,
                              W_c, W_s, temperature, rng)
            if oracle is None:
                return computed, computed
            one_hot = np.zeros(enc.source_mask.shape)
            one_hot[np.arange(one_hot.shape[0]), oracle] = 1.0
            return AttentionRow(constant(one_hot), query_state), computed

        if config.mechanism == MechanismKind.POST_RNN:
            state = tape.gru_cell(de, state, gru)
            used, computed = attention_for(state, step)
            c = context_vector(tape, used.weights, enc.outputs)
            log_probs = post_rnn_output(tape, state, c, params["output.W_o"])
        else:
            used, computed = attention_for(state, step - 1)
            c = context_vector(tape, used.weights, enc.outputs)
            if config.mechanism == MechanismKind.PRE_RNN:
                x = pre_rnn_input(tape, de, c)
            else:
                x = full_focus_input(tape, de, c, params["attention.W_f"])
            state = tape.gru_cell(x, state, gru)
            log_probs = tape.log_softmax(tape.affine(params["output.W_o"], None, state))
        return StepTrace(log_probs, used, state, computed)

    def decode_teacher_forced(self, tape: Tape, enc: EncoderResult, batch: Batch,
                              rng: Optional[np.random.Generator] = None) -> List[StepTrace]:
        """
        Feeds the gold previous token at every step.

        Args:
            tape (Tape): tape recording the pass
            enc (EncoderResult): encoder pass over the same batch
            batch (Batch): padded targets and AG indices
            rng (numpy.random.Generator, optional): noise stream; Gumbel attention is sampled only
                when it is given

        Returns:
            list: one StepTrace per target step, EOS step included
        """
        oracle = self.config.guidance == GuidanceKind.ORACLE
        if oracle and not batch.has_ag:
            raise ConfigurationError("oracle guidance needs AG targets")
        state = enc.final_state
        traces = []
        for t in range(batch.targets.shape[1]):
            trace = self._step(tape, enc, state, batch.dec_inputs[:, t], t + 1,
                               batch.oracle_indices(t) if oracle else None, rng)
            traces.append(trace)
            state = trace.decoder_state
        return traces

    def greedy_decode(self, tape: Tape, enc: EncoderResult, target_vocab: Vocabulary,
                      max_len: Optional[int] = None, batch: Optional[Batch] = None) -> Tuple[List[List[int]], List[StepTrace]]:
        """
        Feeds back the argmax token until every example emitted EOS or max_len steps ran.
        Oracle models read their attention rows from the batch's AG targets.

        Returns:
            tuple: token ids per example without EOS, and the traces of every executed step
        """
        if max_len is None:
            max_len = self.config.max_decode_length
        oracle = self.config.guidance == GuidanceKind.ORACLE
        if oracle and (batch is None or not batch.has_ag):
            raise ConfigurationError("oracle guidance needs AG targets")
        size = enc.source_mask.shape[0]
        eos = target_vocab.index(EOS)
        tokens = np.full(size, target_vocab.index(SOS), dtype=np.int64)
        finished = np.zeros(size, dtype=bool)
        outputs = [[] for _ in range(size)]
        state = enc.final_state
        traces = []
        for t in range(max_len):
            trace = self._step(tape, enc, state, tokens, t + 1, batch.oracle_indices(t) if oracle else None, None)
            traces.append(trace)
            state = trace.decoder_state
            tokens = np.argmax(trace.log_probs.value, axis=-1)
            for b in np.flatnonzero(~finished):
                if tokens[b] == eos:
                    finished[b] = True
                else:
                    outputs[b].append(int(tokens[b]))
            if finished.all():
                break
        return outputs, traces

    def save(self, directory: str):
        """
        Writes checkpoint.txt (config and parameter layout) and checkpoint.bin (little-endian float64
        values in the same order).
        """
        os.makedirs(directory, exist_ok=True)
        lines = [f"config {key} = {format_value(value)}" for key, value in self.config.to_dict().items()]
        offset = 0
        chunks = []
        for param in self.params:
            shape = "x".join(str(d) for d in param.value.shape)
            lines.append(f"param {param.name} {shape} {offset}")
            data = param.value.astype("<f8").tobytes()
            chunks.append(data)
            offset += len(data)
        with open(os.path.join(directory, CHECKPOINT_MANIFEST), "w", encoding="utf-8", newline="\n") as manifest:
            manifest.write("\n".join(lines) + "\n")
        with open(os.path.join(directory, CHECKPOINT_DATA), "wb") as data_file:
            data_file.write(b"".join(chunks))

    @classmethod
    def load(cls, directory: str) -> "Seq2SeqModel":
        manifest_path = os.path.join(directory, CHECKPOINT_MANIFEST)
        config = {}
        layout: Dict[str, Tuple[Tuple[int, ...], int]] = {}
        text_keys = string_keys(ConfigSchemas.MODEL_CONFIG)
        with open(manifest_path, encoding="utf-8") as manifest:
            for number, line in enumerate(manifest, start=1):
                fields = line.split()
                if len(fields) == 4 and fields[0] == "config" and fields[2] == "=":
                    config[fields[1]] = coerce_value(fields[3], fields[1] in text_keys)
                elif len(fields) == 4 and fields[0] == "param":
                    try:
                        layout[fields[1]] = (tuple(int(d) for d in fields[2].split("x")), int(fields[3]))
                    except ValueError:
                        raise DataError(f"{manifest_path}:{number}: malformed parameter line") from None
                elif fields:
                    raise DataError(f"{manifest_path}:{number}: unexpected line")
        model = cls(ModelConfig.from_dict(config))
        with open(os.path.join(directory, CHECKPOINT_DATA), "rb") as data_file:
            data = data_file.read()
        state = {}
        for name, (shape, offset) in layout.items():
            count = int(np.prod(shape))
            if offset + 8 * count > len(data):
                raise DataError(f"{CHECKPOINT_DATA} is too short for parameter {name}")
            state[name] = np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(shape)
        model.params.load_state(state)
        return model
