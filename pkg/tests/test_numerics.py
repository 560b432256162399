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

import math
import unittest
from unittest import TestCase

import numpy as np

from attnguide.errors import ConfigurationError, InvalidInputError, NumericError
from attnguide.numerics import (GRUParams, Parameter, ParameterStore, Tape, adam_step, as_num_array,
                                clip_grad_norm, constant, grad_check, uniform_init)


def _gru_params(rng, input_size, hidden, scale=0.5):
    values = []
    for gate in "zrh":
        values.append(Parameter(f"W_{gate}", rng.uniform(-scale, scale, (hidden, input_size))))
        values.append(Parameter(f"U_{gate}", rng.uniform(-scale, scale, (hidden, hidden))))
        values.append(Parameter(f"b_{gate}", rng.uniform(-scale, scale, hidden)))
    return GRUParams(*values)


class TestArrays(TestCase):
    def test_as_num_array(self):
        array = as_num_array([1, 2, 3, 4, 5, 6], shape=[2, 3])
        self.assertEqual(array.shape, (2, 3))
        self.assertEqual(array[1, 0], 4.0)
        with self.assertRaises(ConfigurationError):
            as_num_array([1, 2, 3], shape=[2, 2])
        with self.assertRaises(NumericError):
            as_num_array([1.0, float("nan")])

    def test_uniform_init(self):
        a = uniform_init((50, 4), np.random.default_rng(3))
        b = uniform_init((50, 4), np.random.default_rng(3))
        np.testing.assert_array_equal(a, b)
        self.assertTrue(np.all(a >= -0.08) and np.all(a < 0.08))
        wide = uniform_init((1000,), np.random.default_rng(3), -0.8, 0.8)
        self.assertGreater(wide.max(), 0.08)
        with self.assertRaises(ConfigurationError):
            uniform_init((2,), np.random.default_rng(0), 0.1, 0.1)


class TestForward(TestCase):
    def test_affine_identity_and_shapes(self):
        tape = Tape()
        x = constant([1.5, -2.0, 3.0])
        y = tape.affine(constant(np.eye(3)), constant(np.zeros(3)), x)
        np.testing.assert_array_equal(y.value, x.value)
        batched = tape.affine(constant([[1.0, 2.0]]), constant([0.5]), constant([[1.0, 1.0], [2.0, 0.0]]))
        np.testing.assert_array_equal(batched.value, [[3.5], [2.5]])
        with self.assertRaises(ConfigurationError) as caught:
            tape.affine(constant(np.ones((2, 3))), None, constant(np.ones(4)))
        self.assertIn("(2, 3)", str(caught.exception))
        self.assertIn("(4,)", str(caught.exception))

    def test_relu(self):
        x = Parameter("x", [-1.0, 0.0, 2.0])
        tape = Tape()
        y = tape.relu(x)
        np.testing.assert_array_equal(y.value, [0.0, 0.0, 2.0])
        tape.backward(tape.weighted_sum(y, np.ones(3)))
        np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0])

    def test_concat(self):
        a = Parameter("a", [2.0])
        b = Parameter("b", [3.0, 4.0])
        tape = Tape()
        y = tape.concat(a, b)
        np.testing.assert_array_equal(y.value, [2.0, 3.0, 4.0])
        tape.backward(tape.weighted_sum(y, [1.0, 2.0, 3.0]))
        np.testing.assert_array_equal(a.grad, [1.0])
        np.testing.assert_array_equal(b.grad, [2.0, 3.0])

    def test_elementwise_mul_shape_mismatch(self):
        with self.assertRaises(ConfigurationError):
            Tape().elementwise_mul(constant([1.0, 2.0]), constant([1.0, 2.0, 3.0]))

    def test_masked_softmax(self):
        tape = Tape()
        y = tape.masked_softmax(constant([0.3, 0.3, 0.3, 5.0]), [True, True, True, False])
        np.testing.assert_allclose(y.value[:3], [1 / 3] * 3, atol=1e-15)
        self.assertEqual(y.value[3], 0.0)

        scores = np.array([0.1, -2.0, 1.7, 0.4])
        shifted = tape.masked_softmax(constant(scores + 123.0), np.ones(4, dtype=bool))
        np.testing.assert_allclose(shifted.value, tape.masked_softmax(constant(scores), np.ones(4, dtype=bool)).value,
                                   atol=1e-15)

        large = tape.masked_softmax(constant([1000.0, 1001.0]), [True, True])
        self.assertTrue(np.all(np.isfinite(large.value)))
        self.assertAlmostEqual(float(large.value.sum()), 1.0, places=12)

        with self.assertRaises(InvalidInputError):
            tape.masked_softmax(constant([1.0, 2.0]), [False, False])

    def test_masked_softmax_batch(self):
        mask = np.array([[True, True, False], [True, True, True]])
        y = Tape().masked_softmax(constant(np.random.default_rng(1).normal(size=(2, 3))), mask)
        np.testing.assert_allclose(y.value.sum(axis=-1), [1.0, 1.0], atol=1e-12)
        self.assertEqual(y.value[0, 2], 0.0)

    def test_gumbel_softmax(self):
        tape = Tape()
        rng = np.random.default_rng(5)
        y = tape.gumbel_softmax(constant([0.2, 1.0, -0.5]), 0.5, rng, [True, False, True])
        self.assertAlmostEqual(float(y.value.sum()), 1.0, places=12)
        self.assertEqual(y.value[1], 0.0)
        with self.assertRaises(ConfigurationError):
            tape.gumbel_softmax(constant([0.2, 1.0]), 0.0, rng)

    def test_gumbel_argmax_frequencies(self):
        logits = np.array([0.5, -1.0, 1.5, 0.0])
        samples = 20000
        y = Tape(record=False).gumbel_softmax(constant(np.tile(logits, (samples, 1))), 2.0,
                                             np.random.default_rng(11))
        frequencies = np.bincount(y.value.argmax(axis=-1), minlength=4) / samples
        expected = np.exp(logits) / np.exp(logits).sum()
        np.testing.assert_allclose(frequencies, expected, atol=0.02)

    def test_log_softmax_and_nll(self):
        tape = Tape()
        log_probs = tape.log_softmax(constant(np.zeros(4)))
        self.assertAlmostEqual(float(tape.nll_loss(log_probs, 2).value), math.log(4), places=12)
        with self.assertRaises(InvalidInputError):
            tape.nll_loss(log_probs, 4)

    def test_gru_cell_zero_weights(self):
        params = GRUParams(*(Parameter(n, np.zeros(s)) for n, s in [
            ("W_z", (2, 3)), ("U_z", (2, 2)), ("b_z", (2,)),
            ("W_r", (2, 3)), ("U_r", (2, 2)), ("b_r", (2,)),
            ("W_h", (2, 3)), ("U_h", (2, 2)), ("b_h", (2,))]))
        h = Tape().gru_cell(constant([1.0, -1.0, 0.5]), constant([0.8, -0.4]), params)
        np.testing.assert_allclose(h.value, [0.4, -0.2], atol=1e-15)

    def test_non_finite_output(self):
        with self.assertRaises(NumericError):
            Tape().affine(constant([[1e308]]), None, constant([1e308]))

    def test_backward_needs_scalar(self):
        tape = Tape()
        y = tape.relu(Parameter("x", [1.0, 2.0]))
        with self.assertRaises(InvalidInputError):
            tape.backward(y)

    def test_unrecorded_tape(self):
        tape = Tape(record=False)
        y = tape.relu(Parameter("x", [1.0, 2.0]))
        self.assertFalse(y.requires_grad)
        self.assertEqual(len(tape), 0)


class TestGradients(TestCase):
    """
    Reverse-mode gradients against central differences
    """

    def test_affine(self):
        for seed in range(10):
            rng = np.random.default_rng(seed)
            W = Parameter("W", rng.normal(size=(3, 4)))
            b = Parameter("b", rng.normal(size=3))
            x = Parameter("x", rng.normal(size=(2, 4)))
            weights = rng.normal(size=(2, 3))
            error = grad_check(lambda tape: tape.weighted_sum(tape.affine(W, b, x), weights), [W, b, x])
            self.assertLess(error, 1e-4)

    def test_gru_cell(self):
        for seed in range(10):
            rng = np.random.default_rng(seed)
            params = _gru_params(rng, 3, 4)
            x = Parameter("x", rng.normal(size=3))
            h = Parameter("h", rng.normal(size=4))
            weights = rng.normal(size=4)
            error = grad_check(lambda tape: tape.weighted_sum(tape.gru_cell(x, h, params), weights),
                               [x, h, *params])
            self.assertLess(error, 1e-4)

    def test_masked_softmax(self):
        for seed in range(10):
            rng = np.random.default_rng(seed)
            scores = Parameter("scores", rng.normal(size=(2, 5)))
            mask = np.array([[True, True, True, False, False], [True, True, True, True, True]])
            weights = rng.normal(size=(2, 5))
            error = grad_check(lambda tape: tape.weighted_sum(tape.masked_softmax(scores, mask), weights), [scores])
            self.assertLess(error, 1e-4)

    def test_gumbel_softmax(self):
        rng = np.random.default_rng(4)
        logits = Parameter("logits", rng.normal(size=4))
        weights = rng.normal(size=4)

        def loss(tape):
            return tape.weighted_sum(tape.gumbel_softmax(logits, 0.7, np.random.default_rng(9)), weights)
        self.assertLess(grad_check(loss, [logits]), 1e-4)

    def test_elementwise_chain(self):
        rng = np.random.default_rng(2)
        a = Parameter("a", rng.uniform(0.2, 1.0, size=3))
        b = Parameter("b", rng.normal(size=3))
        rows = Parameter("rows", rng.normal(size=(3, 2)))
        table = Parameter("table", rng.normal(size=(5, 3)))

        def loss(tape):
            mixed = tape.elementwise_mul(tape.sigmoid(b), tape.tanh(a))
            probs = tape.masked_softmax(tape.add(mixed, tape.embedding(table, 2)), np.ones(3, dtype=bool))
            context = tape.weighted_rows(probs, rows)
            picked = tape.clamped_log(tape.select(tape.one_minus(tape.scale(probs, 0.5)), np.array(1)))
            return tape.add(tape.weighted_sum(context, [0.3, -1.2]), picked)
        self.assertLess(grad_check(loss, [a, b, rows, table]), 1e-4)


    def test_backward_is_linear(self):
        rng = np.random.default_rng(8)
        W = Parameter("W", rng.uniform(-1.0, 1.0, size=(3, 2)))
        x = constant(rng.uniform(-1.0, 1.0, size=2))
        weights = rng.uniform(-1.0, 1.0, size=3)

        def f(tape):
            return tape.weighted_sum(tape.tanh(tape.affine(W, None, x)), weights)

        def g(tape):
            h = tape.sigmoid(tape.affine(W, None, x))
            return tape.dot(h, h)

        separate = []
        for build in (f, g):
            W.grad.fill(0.0)
            tape = Tape()
            tape.backward(build(tape))
            separate.append(W.grad.copy())
        W.grad.fill(0.0)
        tape = Tape()
        tape.backward(tape.add(f(tape), g(tape)))
        np.testing.assert_allclose(W.grad, separate[0] + separate[1], rtol=1e-12, atol=1e-15)

        # without zeroing, successive backward passes accumulate
        for build in (f, g):
            tape = Tape()
            tape.backward(build(tape))
        np.testing.assert_allclose(W.grad, 2.0 * (separate[0] + separate[1]), rtol=1e-12, atol=1e-15)


class TestOptimizer(TestCase):
    def test_adam_matches_recomputation(self):
        rng = np.random.default_rng(0)
        param = Parameter("w", rng.normal(size=5))
        start = param.value.copy()
        grads = [rng.normal(size=5) for _ in range(3)]
        m = np.zeros(5)
        v = np.zeros(5)
        expected = start.copy()
        for step, grad in enumerate(grads, start=1):
            param.grad[...] = grad
            adam_step([param], lr=0.01)
            m = 0.9 * m + (1 - 0.9) * grad
            v = 0.999 * v + (1 - 0.999) * (grad * grad)
            expected -= 0.01 * (m / (1 - 0.9 ** step)) / (np.sqrt(v / (1 - 0.999 ** step)) + 1e-8)
        np.testing.assert_allclose(param.value, expected, rtol=0, atol=1e-14)
        self.assertEqual(param.step_count, 3)

    def test_adam_first_step_moves_by_lr(self):
        param = Parameter("w", [0.0, 0.0])
        param.grad[...] = [3.0, -0.5]
        adam_step([param], lr=0.001)
        np.testing.assert_allclose(param.value, [-0.001, 0.001], rtol=1e-6)
        np.testing.assert_array_equal(param.grad, [3.0, -0.5])

    def test_adam_rejects_non_finite(self):
        param = Parameter("decoder.weights", [1.0])
        param.grad[...] = [np.inf]
        with self.assertRaises(NumericError) as caught:
            adam_step([param])
        self.assertIn("decoder.weights", str(caught.exception))
        self.assertEqual(param.value[0], 1.0)

    def test_clip_grad_norm(self):
        a = Parameter("a", [0.0, 0.0])
        b = Parameter("b", [0.0])
        a.grad[...] = [3.0, 0.0]
        b.grad[...] = [4.0]
        self.assertAlmostEqual(clip_grad_norm([a, b], 1.0), 5.0)
        np.testing.assert_allclose(a.grad, [0.6, 0.0])
        np.testing.assert_allclose(b.grad, [0.8])


class TestParameterStore(TestCase):
    def test_store(self):
        store = ParameterStore()
        store.add("a", np.ones((2, 2)))
        store.add("b", np.zeros(3))
        self.assertEqual(store.names(), ["a", "b"])
        self.assertEqual(store.num_scalars(), 7)
        with self.assertRaises(ConfigurationError):
            store.add("a", np.ones(1))
        state = store.state()
        store["a"].value[0, 0] = 9.0
        store.load_state(state)
        self.assertEqual(store["a"].value[0, 0], 1.0)
        with self.assertRaises(ConfigurationError):
            store.load_state({"a": np.ones(4), "b": np.zeros(3)})


if __name__ == "__main__":
    unittest.main()
