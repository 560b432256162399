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
Alignment scoring and the three ways a context vector is combined with the decoder.

Single-pair functions take 1-D tensors; score_all and attend work on a padded batch of
encoder outputs [..., N, H] with one query per leading position.
"""

from typing import NamedTuple, Optional

import numpy as np

from attnguide.errors import ConfigurationError
from attnguide.numerics import NumArray, Tape, Tensor


class AlignmentKind:
    """
    Supported alignment models
    """
    DOT = "dot"
    MLP = "mlp"

    ALL = (DOT, MLP)


class MechanismKind:
    """
    Where the context vector enters the decoder
    """
    PRE_RNN = "pre_rnn"
    POST_RNN = "post_rnn"
    FULL_FOCUS = "full_focus"

    ALL = (PRE_RNN, POST_RNN, FULL_FOCUS)

    @staticmethod
    def queries_previous_state(mechanism: str) -> bool:
        return mechanism != MechanismKind.POST_RNN


class AttentionRow(NamedTuple):
    """
    weights lies on the simplex over source positions with zeros at padding.
    query_state is the decoder step whose state produced the row: t for post_rnn, t - 1 otherwise.
    """
    weights: Tensor
    query_state: int


def mlp_score(tape: Tape, eo: Tensor, do: Tensor, W_c: Tensor, W_s: Tensor) -> Tensor:
    """
    score(eo, do) = W_s . relu(W_c [eo; do])

    Args:
        tape (Tape): tape recording the computation
        eo (Tensor): encoder state(s) [..., H]
        do (Tensor): decoder state(s), same shape as eo
        W_c (Tensor): [H x 2H]
        W_s (Tensor): vector [H], used as a 1 x H matrix

    Returns:
        Tensor: scores of shape eo.shape[:-1]
    """
    hidden = W_c.value.shape[0]
    if W_s.value.shape != (hidden,):
        raise ConfigurationError(f"W_s shape {W_s.value.shape} does not match W_c {W_c.value.shape}")
    if eo.value.shape != do.value.shape:
        raise ConfigurationError(f"encoder state {eo.value.shape} and decoder state {do.value.shape} differ")
    projected = tape.relu(tape.affine(W_c, None, tape.concat(eo, do)))
    return tape.dot(projected, W_s)


def dot_score(tape: Tape, eo: Tensor, do: Tensor) -> Tensor:
    """
    Inner product of encoder and decoder states.
    """
    if eo.value.shape[-1] != do.value.shape[-1]:
        raise ConfigurationError(f"dot alignment needs equal sizes, got {eo.value.shape} and {do.value.shape}")
    return tape.dot(eo, do)


def score_all(tape: Tape, encoder_outputs: Tensor, query: Tensor, alignment: str,
              W_c: Optional[Tensor] = None, W_s: Optional[Tensor] = None) -> Tensor:
    """
    Scores every source position against the query.

    Args:
        encoder_outputs (Tensor): [..., N, H]
        query (Tensor): [..., H]
        alignment (str): one of AlignmentKind.ALL

    Returns:
        Tensor: [..., N]
    """
    n_source = encoder_outputs.value.shape[-2]
    expanded = tape.expand(query, n_source)
    if alignment == AlignmentKind.DOT:
        return dot_score(tape, encoder_outputs, expanded)
    if alignment == AlignmentKind.MLP:
        if W_c is None or W_s is None:
            raise ConfigurationError("mlp alignment needs W_c and W_s")
        return mlp_score(tape, encoder_outputs, expanded, W_c, W_s)
    raise ConfigurationError(f"unknown alignment {alignment}")


def attend(tape: Tape, encoder_outputs: Tensor, query: Tensor, alignment: str, mask: NumArray,
           query_state: int = 0, W_c: Optional[Tensor] = None, W_s: Optional[Tensor] = None,
           gumbel_temperature: Optional[float] = None, rng: Optional[np.random.Generator] = None) -> AttentionRow:
    """
    Scores every position with the chosen alignment and normalizes over the valid ones.
    Scores go through gumbel_softmax instead of masked_softmax when a temperature is given.

    Args:
        mask (array of bool): [..., N], True at real source tokens
        query_state (int): decoder step of the query, recorded on the row

    Returns:
        AttentionRow
    """
    scores = score_all(tape, encoder_outputs, query, alignment, W_c, W_s)
    if gumbel_temperature is not None:
        weights = tape.gumbel_softmax(scores, gumbel_temperature, rng, mask)
    else:
        weights = tape.masked_softmax(scores, mask)
    return AttentionRow(weights, query_state)


def context_vector(tape: Tape, weights: Tensor, encoder_outputs: Tensor) -> Tensor:
    """
    c = sum_i weights_i * eo_i
    """
    return tape.weighted_rows(weights, encoder_outputs)


def pre_rnn_input(tape: Tape, de: Tensor, c: Tensor) -> Tensor:
    # embedding first
    return tape.concat(de, c)


def full_focus_input(tape: Tape, de: Tensor, c: Tensor, W_f: Tensor) -> Tensor:
    """
    c * relu(W_f [de; c]), of size H.
    """
    if W_f.value.shape != (c.value.shape[-1], de.value.shape[-1] + c.value.shape[-1]):
        raise ConfigurationError(
            f"W_f shape {W_f.value.shape} does not fit embedding {de.value.shape} and context {c.value.shape}")
    gate = tape.relu(tape.affine(W_f, None, tape.concat(de, c)))
    return tape.elementwise_mul(c, gate)


def post_rnn_output(tape: Tape, do: Tensor, c: Tensor, W_o: Tensor) -> Tensor:
    """
    log_softmax(W_o [do; c]) where c was computed from the current decoder state.
    """
    if W_o.value.shape[1:] != (do.value.shape[-1] + c.value.shape[-1],):
        raise ConfigurationError(f"W_o shape {W_o.value.shape} does not fit [do; c] of {do.value.shape} and {c.value.shape}")
    return tape.log_softmax(tape.affine(W_o, None, tape.concat(do, c)))
