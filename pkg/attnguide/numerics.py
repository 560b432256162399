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
Differentiable array core used by every other module.

Values are float64 numpy arrays in row-major layout. A Tape records the operations executed
through it and replays them in reverse to accumulate gradients into Tensors and Parameters.
All operations accept leading batch dimensions: a vector op works on shape (n,) as well as
(B, n), and the same closures serve a single example and a padded batch.

Function summaries:
Tape.affine:           y = W x + b
Tape.relu:             elementwise max(0, x), subgradient 0 at 0
Tape.concat:           concatenation along the last axis
Tape.elementwise_mul:  Hadamard product
Tape.masked_softmax:   softmax restricted to valid positions, exact zeros elsewhere
Tape.gumbel_softmax:   softmax((logits + g) / tau) with standard Gumbel noise g
Tape.gru_cell:         one GRU step, update gate z interpolates h and the candidate
Tape.nll_loss:         -log_probs[target]
adam_step:             bias-corrected Adam update applied in place
uniform_init:          seeded i.i.d. uniform array
grad_check:            reverse-mode gradient against central differences
"""

from collections import OrderedDict
from typing import Callable, Dict, Iterable, Iterator, List, NamedTuple, Optional, Sequence

import numpy as np

from attnguide.errors import ConfigurationError, InvalidInputError, NumericError

NumArray = np.ndarray


def as_num_array(data, shape: Optional[Sequence[int]] = None) -> NumArray:
    """
    Builds a NumArray from nested lists or an array and checks its invariants.

    Args:
        data: array-like numbers
        shape (list, optional): expected extents; data is reshaped row-major when given

    Returns:
        numpy.ndarray: float64 array
    """
    array = np.array(data, dtype=np.float64)
    if shape is not None:
        if int(np.prod(shape)) != array.size:
            raise ConfigurationError(f"cannot lay out {array.size} values as shape {tuple(shape)}")
        array = array.reshape(tuple(shape))
    _check_finite(array, "as_num_array")
    return array


def _check_finite(value: NumArray, where: str):
    if not np.all(np.isfinite(value)):
        raise NumericError(f"non-finite values produced by {where}")


class Tensor:
    """
    A value on the tape. grad is allocated on the first gradient that reaches it.
    """

    __slots__ = ("value", "grad", "requires_grad")

    def __init__(self, value: NumArray, requires_grad: bool = False):
        self.value = value
        self.grad = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """
    Trainable array with its gradient accumulator and Adam moments, all of the value's shape.
    """

    __slots__ = ("name", "m", "v", "step_count")

    def __init__(self, name: str, value: NumArray):
        super().__init__(np.array(value, dtype=np.float64), requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.value)
        self.m = np.zeros_like(self.value)
        self.v = np.zeros_like(self.value)
        self.step_count = 0

    def __repr__(self):
        return f"Parameter({self.name}, shape={self.value.shape})"


def constant(value) -> Tensor:
    """
    Wraps an array (or anything numpy can convert) as a Tensor that receives no gradient.
    """
    return Tensor(np.asarray(value, dtype=np.float64), requires_grad=False)


def _accumulate(tensor: Tensor, grad: NumArray):
    if not tensor.requires_grad:
        return
    if tensor.grad is None:
        tensor.grad = np.array(grad, dtype=np.float64)
    else:
        tensor.grad += grad


def _reduce_to(grad: NumArray, shape) -> NumArray:
    # sums out broadcast leading axes
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    return grad


def _softmax_backward(y: NumArray, g: NumArray) -> NumArray:
    return y * (g - np.sum(g * y, axis=-1, keepdims=True))


def _masked_softmax_values(scores: NumArray, mask: NumArray) -> NumArray:
    if not np.all(np.any(mask, axis=-1)):
        raise InvalidInputError("masked_softmax needs at least one valid position per row")
    peak = np.max(np.where(mask, scores, -np.inf), axis=-1, keepdims=True)
    shifted = np.where(mask, scores - peak, 0.0)
    weights = np.where(mask, np.exp(shifted), 0.0)
    return weights / np.sum(weights, axis=-1, keepdims=True)


class Tape:
    """
    Ordered record of executed operations. Every op returns a new Tensor; when recording, the op
    also appends a closure that pushes the output gradient to the inputs. backward runs the
    closures in exact reverse execution order and then empties the record.
    """

    def __init__(self, record: bool = True):
        """
        Args:
            record (bool, optional): when False, ops only compute values. Defaults to True.
        """
        self.record = record
        self._records: List[Callable[[], None]] = []

    def __len__(self):
        return len(self._records)

    def _output(self, value: NumArray, inputs: Iterable[Tensor], where: str) -> Tensor:
        _check_finite(value, where)
        return Tensor(value, requires_grad=self.record and any(t.requires_grad for t in inputs))

    def _push(self, out: Tensor, backward: Callable[[NumArray], None]):
        if not out.requires_grad:
            return

        def run():
            if out.grad is not None:
                backward(out.grad)
        self._records.append(run)

    def backward(self, loss: Tensor):
        """
        Accumulates d(loss)/d(x) into every Tensor on the tape that requires a gradient.

        Args:
            loss (Tensor): scalar output of ops recorded on this tape
        """
        if loss.value.shape != ():
            raise InvalidInputError(f"backward needs a scalar loss, got shape {loss.value.shape}")
        _check_finite(loss.value, "loss")
        loss.grad = np.ones((), dtype=np.float64)
        for run in reversed(self._records):
            run()
        self._records = []

    # ---------------------------------------------------------------- linear algebra

    def affine(self, W: Tensor, b: Optional[Tensor], x: Tensor) -> Tensor:
        """
        y = W x + b on the last axis of x.

        Args:
            W (Tensor): matrix [m x n]
            b (Tensor, optional): vector [m]
            x (Tensor): [..., n]

        Returns:
            Tensor: [..., m]
        """
        if W.value.ndim != 2 or x.value.shape[-1:] != W.value.shape[1:]:
            raise ConfigurationError(
                f"affine shape mismatch: W {W.value.shape} cannot multiply x {x.value.shape}")
        if b is not None and b.value.shape != W.value.shape[:1]:
            raise ConfigurationError(
                f"affine shape mismatch: b {b.value.shape} does not match W {W.value.shape}")
        value = x.value @ W.value.T
        if b is not None:
            value = value + b.value
        inputs = (W, x) if b is None else (W, b, x)
        out = self._output(value, inputs, "affine")

        def backward(g):
            g2 = g.reshape(-1, g.shape[-1])
            x2 = x.value.reshape(-1, x.value.shape[-1])
            _accumulate(W, g2.T @ x2)
            if b is not None:
                _accumulate(b, g2.sum(axis=0))
            _accumulate(x, g @ W.value)
        self._push(out, backward)
        return out

    def dot(self, a: Tensor, b: Tensor) -> Tensor:
        """
        Inner product over the last axis. b is either a's shape or a single vector broadcast
        against every row of a.
        """
        if a.value.shape[-1:] != b.value.shape[-1:] or (b.value.ndim > 1 and a.value.shape != b.value.shape):
            raise ConfigurationError(f"dot dimension mismatch: {a.value.shape} and {b.value.shape}")
        out = self._output(np.sum(a.value * b.value, axis=-1), (a, b), "dot")

        def backward(g):
            g = g[..., None]
            _accumulate(a, g * b.value)
            _accumulate(b, _reduce_to(g * a.value, b.value.shape))
        self._push(out, backward)
        return out

    def weighted_rows(self, weights: Tensor, rows: Tensor) -> Tensor:
        """
        sum_i weights[..., i] * rows[..., i, :]
        """
        if weights.value.shape != rows.value.shape[:-1]:
            raise ConfigurationError(
                f"weight length mismatch: weights {weights.value.shape} for rows {rows.value.shape}")
        value = np.einsum("...n,...nh->...h", weights.value, rows.value)
        out = self._output(value, (weights, rows), "weighted_rows")

        def backward(g):
            _accumulate(weights, np.einsum("...h,...nh->...n", g, rows.value))
            _accumulate(rows, weights.value[..., :, None] * g[..., None, :])
        self._push(out, backward)
        return out

    # ---------------------------------------------------------------- elementwise

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        if a.value.shape != b.value.shape:
            raise ConfigurationError(f"add shape mismatch: {a.value.shape} and {b.value.shape}")
        out = self._output(a.value + b.value, (a, b), "add")

        def backward(g):
            _accumulate(a, g)
            _accumulate(b, g)
        self._push(out, backward)
        return out

    def elementwise_mul(self, a: Tensor, b: Tensor) -> Tensor:
        """
        Hadamard product of two arrays of equal shape.
        """
        if a.value.shape != b.value.shape:
            raise ConfigurationError(
                f"elementwise_mul shape mismatch: {a.value.shape} and {b.value.shape}")
        out = self._output(a.value * b.value, (a, b), "elementwise_mul")

        def backward(g):
            _accumulate(a, g * b.value)
            _accumulate(b, g * a.value)
        self._push(out, backward)
        return out

    def one_minus(self, x: Tensor) -> Tensor:
        out = self._output(1.0 - x.value, (x,), "one_minus")
        self._push(out, lambda g: _accumulate(x, -g))
        return out

    def scale(self, x: Tensor, factor: float) -> Tensor:
        out = self._output(x.value * factor, (x,), "scale")
        self._push(out, lambda g: _accumulate(x, g * factor))
        return out

    def relu(self, x: Tensor) -> Tensor:
        """
        Elementwise max(0, x); the subgradient at 0 is 0.
        """
        active = x.value > 0.0
        out = self._output(np.where(active, x.value, 0.0), (x,), "relu")
        self._push(out, lambda g: _accumulate(x, np.where(active, g, 0.0)))
        return out

    def sigmoid(self, x: Tensor) -> Tensor:
        y = 0.5 * (1.0 + np.tanh(0.5 * x.value))
        out = self._output(y, (x,), "sigmoid")
        self._push(out, lambda g: _accumulate(x, g * y * (1.0 - y)))
        return out

    def tanh(self, x: Tensor) -> Tensor:
        y = np.tanh(x.value)
        out = self._output(y, (x,), "tanh")
        self._push(out, lambda g: _accumulate(x, g * (1.0 - y * y)))
        return out

    def clamped_log(self, x: Tensor, floor: float = 1e-12) -> Tensor:
        """
        log(max(x, floor)); no gradient flows where the floor is active.
        """
        above = x.value > floor
        out = self._output(np.log(np.maximum(x.value, floor)), (x,), "clamped_log")
        self._push(out, lambda g: _accumulate(x, np.where(above, g / np.where(above, x.value, 1.0), 0.0)))
        return out

    def blend(self, new: Tensor, old: Tensor, keep: NumArray) -> Tensor:
        """
        keep * new + (1 - keep) * old with a constant 0/1 keep broadcast over the last axis.
        Used to hold recurrent states over padded steps.
        """
        keep = np.asarray(keep, dtype=np.float64)[..., None]
        out = self._output(keep * new.value + (1.0 - keep) * old.value, (new, old), "blend")

        def backward(g):
            _accumulate(new, keep * g)
            _accumulate(old, (1.0 - keep) * g)
        self._push(out, backward)
        return out

    # ---------------------------------------------------------------- structure

    def concat(self, a: Tensor, b: Tensor) -> Tensor:
        """
        Order-preserving concatenation on the last axis; backward splits the gradient.
        """
        if a.value.shape[:-1] != b.value.shape[:-1]:
            raise ConfigurationError(f"concat leading shape mismatch: {a.value.shape} and {b.value.shape}")
        split = a.value.shape[-1]
        out = self._output(np.concatenate([a.value, b.value], axis=-1), (a, b), "concat")

        def backward(g):
            _accumulate(a, g[..., :split])
            _accumulate(b, g[..., split:])
        self._push(out, backward)
        return out

    def stack(self, tensors: Sequence[Tensor]) -> Tensor:
        """
        Stacks [..., H] tensors into [..., N, H].
        """
        out = self._output(np.stack([t.value for t in tensors], axis=-2), tensors, "stack")

        def backward(g):
            for i, tensor in enumerate(tensors):
                _accumulate(tensor, g[..., i, :])
        self._push(out, backward)
        return out

    def expand(self, x: Tensor, n: int) -> Tensor:
        """
        Repeats [..., H] into [..., n, H].
        """
        value = np.repeat(x.value[..., None, :], n, axis=-2)
        out = self._output(value, (x,), "expand")
        self._push(out, lambda g: _accumulate(x, g.sum(axis=-2)))
        return out

    def embedding(self, table: Tensor, ids: NumArray) -> Tensor:
        """
        Row lookup table[ids] for an integer array of ids.
        """
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= table.value.shape[0]):
            raise InvalidInputError(f"embedding id outside [0, {table.value.shape[0]})")
        out = self._output(table.value[ids], (table,), "embedding")

        def backward(g):
            if not table.requires_grad:
                return
            if table.grad is None:
                table.grad = np.zeros_like(table.value)
            np.add.at(table.grad, ids, g)
        self._push(out, backward)
        return out

    def select(self, x: Tensor, index: NumArray) -> Tensor:
        """
        x[..., index] along the last axis, one index per leading position.
        """
        index = np.asarray(index, dtype=np.int64)
        if index.shape != x.value.shape[:-1]:
            raise ConfigurationError(f"select index shape {index.shape} does not fit {x.value.shape}")
        if index.size and (index.min() < 0 or index.max() >= x.value.shape[-1]):
            raise InvalidInputError(f"select index outside [0, {x.value.shape[-1]})")
        picked = np.take_along_axis(x.value, index[..., None], axis=-1)[..., 0]
        out = self._output(picked, (x,), "select")

        def backward(g):
            full = np.zeros_like(x.value)
            np.put_along_axis(full, index[..., None], g[..., None], axis=-1)
            _accumulate(x, full)
        self._push(out, backward)
        return out

    # ---------------------------------------------------------------- reductions / distributions

    def weighted_sum(self, x: Tensor, weights: NumArray) -> Tensor:
        """
        Scalar sum(x * weights) for constant weights of x's shape.
        """
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != x.value.shape:
            raise ConfigurationError(f"weighted_sum weights {weights.shape} for {x.value.shape}")
        out = self._output(np.sum(x.value * weights), (x,), "weighted_sum")
        self._push(out, lambda g: _accumulate(x, g * weights))
        return out

    def masked_softmax(self, scores: Tensor, valid_mask: NumArray) -> Tensor:
        """
        Softmax over the valid positions of the last axis. Invalid positions are excluded before
        exponentiation and get weight exactly 0; the maximum valid score is subtracted first.

        Args:
            scores (Tensor): [..., N]
            valid_mask (array of bool): [..., N], at least one True per row

        Returns:
            Tensor: [..., N] rows on the probability simplex
        """
        valid_mask = np.asarray(valid_mask, dtype=bool)
        if valid_mask.shape != scores.value.shape:
            raise ConfigurationError(f"mask shape {valid_mask.shape} for scores {scores.value.shape}")
        y = _masked_softmax_values(scores.value, valid_mask)
        out = self._output(y, (scores,), "masked_softmax")
        self._push(out, lambda g: _accumulate(scores, _softmax_backward(y, g)))
        return out

    def gumbel_softmax(self, logits: Tensor, temperature: float, rng: np.random.Generator,
                       valid_mask: Optional[NumArray] = None) -> Tensor:
        """
        softmax((logits + g) / temperature) with g i.i.d. standard Gumbel, restricted to the
        valid positions like masked_softmax.
        """
        if not temperature > 0.0:
            raise ConfigurationError(f"gumbel temperature must be positive, got {temperature}")
        if valid_mask is None:
            valid_mask = np.ones(logits.value.shape, dtype=bool)
        valid_mask = np.asarray(valid_mask, dtype=bool)
        noise = rng.gumbel(size=logits.value.shape)
        y = _masked_softmax_values((logits.value + noise) / temperature, valid_mask)
        out = self._output(y, (logits,), "gumbel_softmax")
        self._push(out, lambda g: _accumulate(logits, _softmax_backward(y, g) / temperature))
        return out

    def log_softmax(self, x: Tensor) -> Tensor:
        shifted = x.value - np.max(x.value, axis=-1, keepdims=True)
        y = shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))
        out = self._output(y, (x,), "log_softmax")

        def backward(g):
            _accumulate(x, g - np.exp(y) * np.sum(g, axis=-1, keepdims=True))
        self._push(out, backward)
        return out

    def nll_loss(self, log_probs: Tensor, target) -> Tensor:
        """
        -log_probs[target] for every leading position.

        Args:
            log_probs (Tensor): [..., V] log-distribution
            target (int or array of int): [...] indices

        Returns:
            Tensor: [...] per-position losses (a scalar for a single vector)
        """
        target = np.asarray(target, dtype=np.int64)
        vocab = log_probs.value.shape[-1]
        if target.size and (target.min() < 0 or target.max() >= vocab):
            raise InvalidInputError(f"nll_loss target outside [0, {vocab})")
        picked = self.select(log_probs, target)
        out = self._output(-picked.value, (picked,), "nll_loss")
        self._push(out, lambda g: _accumulate(picked, -g))
        return out

    # ---------------------------------------------------------------- recurrent cell

    def gru_cell(self, x: Tensor, h_prev: Tensor, params: "GRUParams") -> Tensor:
        """
        One GRU step.
            z  = sigmoid(W_z x + U_z h + b_z)
            r  = sigmoid(W_r x + U_r h + b_r)
            h~ = tanh(W_h x + U_h (r * h) + b_h)
            h' = (1 - z) * h + z * h~

        Args:
            x (Tensor): [..., I]
            h_prev (Tensor): [..., H]
            params (GRUParams): the nine cell parameters

        Returns:
            Tensor: [..., H]
        """
        hidden = params.U_z.value.shape[0]
        if h_prev.value.shape[-1] != hidden:
            raise ConfigurationError(f"gru_cell state {h_prev.value.shape} for hidden size {hidden}")
        z = self.sigmoid(self.add(self.affine(params.W_z, params.b_z, x), self.affine(params.U_z, None, h_prev)))
        r = self.sigmoid(self.add(self.affine(params.W_r, params.b_r, x), self.affine(params.U_r, None, h_prev)))
        gated = self.elementwise_mul(r, h_prev)
        candidate = self.tanh(self.add(self.affine(params.W_h, params.b_h, x), self.affine(params.U_h, None, gated)))
        return self.add(self.elementwise_mul(self.one_minus(z), h_prev), self.elementwise_mul(z, candidate))


class GRUParams(NamedTuple):
    W_z: Parameter
    U_z: Parameter
    b_z: Parameter
    W_r: Parameter
    U_r: Parameter
    b_r: Parameter
    W_h: Parameter
    U_h: Parameter
    b_h: Parameter


class ParameterStore:
    """
    Ordered collection of named Parameters.
    """

    def __init__(self):
        self._params: "OrderedDict[str, Parameter]" = OrderedDict()

    def add(self, name: str, value: NumArray) -> Parameter:
        if name in self._params:
            raise ConfigurationError(f"duplicate parameter name {name}")
        param = Parameter(name, value)
        self._params[name] = param
        return param

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[Parameter]:
        return iter(self._params.values())

    def __len__(self):
        return len(self._params)

    def names(self) -> List[str]:
        return list(self._params)

    def num_scalars(self) -> int:
        return sum(p.value.size for p in self)

    def zero_grad(self):
        for param in self:
            param.grad.fill(0.0)

    def state(self) -> Dict[str, NumArray]:
        """
        Copies of every parameter value, keyed by name.
        """
        return OrderedDict((p.name, p.value.copy()) for p in self)

    def load_state(self, state: Dict[str, NumArray]):
        for param in self:
            if param.name not in state:
                raise ConfigurationError(f"missing parameter {param.name}")
            value = np.asarray(state[param.name], dtype=np.float64)
            if value.shape != param.value.shape:
                raise ConfigurationError(
                    f"parameter {param.name} has shape {param.value.shape}, got {value.shape}")
            param.value[...] = value


def uniform_init(shape: Sequence[int], rng: np.random.Generator, lo: float = -0.08, hi: float = 0.08) -> NumArray:
    """
    I.i.d. uniform values in [lo, hi).
    """
    if not lo < hi:
        raise ConfigurationError(f"uniform_init needs lo < hi, got [{lo}, {hi})")
    return rng.uniform(lo, hi, size=tuple(shape))


def clip_grad_norm(params: Iterable[Parameter], max_norm: float) -> float:
    """
    Scales all gradients so their joint L2 norm is at most max_norm.

    Returns:
        float: the norm before clipping
    """
    params = list(params)
    total = float(np.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params)))
    if total > max_norm:
        scale = max_norm / total
        for param in params:
            param.grad *= scale
    return total


def adam_step(params: Iterable[Parameter], lr: float = 0.001, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8):
    """
    Standard bias-corrected Adam update, applied in place. Gradients are left untouched.
    """
    for param in params:
        if not np.all(np.isfinite(param.grad)):
            raise NumericError(f"non-finite gradient in parameter {param.name}")
        param.step_count += 1
        param.m *= beta1
        param.m += (1.0 - beta1) * param.grad
        param.v *= beta2
        param.v += (1.0 - beta2) * (param.grad * param.grad)
        m_hat = param.m / (1.0 - beta1 ** param.step_count)
        v_hat = param.v / (1.0 - beta2 ** param.step_count)
        param.value -= lr * m_hat / (np.sqrt(v_hat) + eps)


def grad_check(fn: Callable[[Tape], Tensor], params: Sequence[Parameter], h: float = 1e-5) -> float:
    """
    Compares the reverse-mode gradient of a scalar function with central differences.

    Args:
        fn (function): builds the scalar loss on the given tape from params
        params (list): Parameters to check, every coordinate is perturbed
        h (float, optional): finite-difference step. Defaults to 1e-5.

    Returns:
        float: max over coordinates of |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)
    """
    for param in params:
        param.grad.fill(0.0)
    tape = Tape()
    tape.backward(fn(tape))
    analytic = [param.grad.copy() for param in params]

    worst = 0.0
    for param, exact in zip(params, analytic):
        flat = param.value.reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + h
            upper = float(fn(Tape(record=False)).value)
            flat[i] = saved - h
            lower = float(fn(Tape(record=False)).value)
            flat[i] = saved
            numeric = (upper - lower) / (2.0 * h)
            a = float(exact.reshape(-1)[i])
            worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), 1e-8))
    return worst
