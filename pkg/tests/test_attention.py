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

from attnguide.attention import (AlignmentKind, MechanismKind, attend, context_vector, dot_score,
                                 full_focus_input, mlp_score, post_rnn_output, pre_rnn_input, score_all)
from attnguide.errors import ConfigurationError
from attnguide.numerics import Parameter, Tape, constant, grad_check


class TestScores(TestCase):
    def test_mlp_score_zero_weights(self):
        tape = Tape()
        eo = constant([0.3, -1.0])
        do = constant([2.0, 0.5])
        self.assertEqual(float(mlp_score(tape, eo, do, constant(np.zeros((2, 4))), constant([1.0, 1.0])).value), 0.0)
        self.assertEqual(float(mlp_score(tape, eo, do, constant(np.ones((2, 4))), constant([0.0, 0.0])).value), 0.0)

    def test_mlp_score_by_hand(self):
        score = mlp_score(Tape(), constant([0.5]), constant([0.25]), constant([[1.0, 1.0]]), constant([2.0]))
        self.assertAlmostEqual(float(score.value), 1.5, places=15)

    def test_mlp_score_linear_region(self):
        rng = np.random.default_rng(7)
        eo = rng.uniform(0.1, 1.0, 3)
        do = rng.uniform(0.1, 1.0, 3)
        W_c = rng.uniform(0.0, 1.0, (3, 6))
        W_s = rng.normal(size=3)
        score = mlp_score(Tape(), constant(eo), constant(do), constant(W_c), constant(W_s))
        self.assertAlmostEqual(float(score.value), float(W_s @ (W_c @ np.concatenate([eo, do]))), delta=1e-12)

    def test_mlp_score_gradients(self):
        rng = np.random.default_rng(11)
        eo = Parameter("eo", rng.normal(size=4))
        do = Parameter("do", rng.normal(size=4))
        W_c = Parameter("W_c", rng.normal(size=(4, 8)))
        W_s = Parameter("W_s", rng.normal(size=4))
        self.assertLess(grad_check(lambda tape: mlp_score(tape, eo, do, W_c, W_s), [eo, do, W_c, W_s]), 1e-5)

    def test_mlp_score_shape_mismatch(self):
        with self.assertRaises(ConfigurationError):
            mlp_score(Tape(), constant([1.0, 2.0]), constant([1.0, 2.0]), constant(np.ones((2, 4))), constant([1.0]))

    def test_dot_score(self):
        tape = Tape()
        self.assertEqual(float(dot_score(tape, constant([1.0, 0.0]), constant([0.0, 3.0])).value), 0.0)
        self.assertEqual(float(dot_score(tape, constant([1.0, 2.0]), constant([3.0, 4.0])).value), 11.0)
        a = constant([0.3, -0.7, 1.1])
        b = constant([2.0, 0.1, -0.4])
        self.assertEqual(float(dot_score(tape, a, b).value), float(dot_score(tape, b, a).value))
        with self.assertRaises(ConfigurationError):
            dot_score(tape, constant([1.0, 2.0]), constant([1.0, 2.0, 3.0]))

    def test_score_all_matches_pairs(self):
        rng = np.random.default_rng(3)
        eo = rng.normal(size=(4, 3))
        query = rng.normal(size=3)
        tape = Tape()
        scores = score_all(tape, constant(eo), constant(query), AlignmentKind.DOT)
        np.testing.assert_allclose(scores.value, eo @ query, atol=1e-14)


class TestAttend(TestCase):
    def test_identical_states_give_uniform_weights(self):
        eo = constant(np.tile([0.4, -0.2], (4, 1)))
        row = attend(Tape(), eo, constant([1.0, 2.0]), AlignmentKind.DOT, [True, True, True, False])
        np.testing.assert_allclose(row.weights.value, [1 / 3, 1 / 3, 1 / 3, 0.0], atol=1e-15)

    def test_single_position(self):
        row = attend(Tape(), constant([[0.5, 0.1]]), constant([1.0, -1.0]), AlignmentKind.DOT, [True])
        self.assertEqual(row.weights.value.tolist(), [1.0])

    def test_mlp_attend_matches_recomputation(self):
        rng = np.random.default_rng(21)
        eo = rng.normal(size=(5, 3))
        query = rng.normal(size=3)
        W_c = rng.normal(size=(3, 6))
        W_s = rng.normal(size=3)
        row = attend(Tape(), constant(eo), constant(query), AlignmentKind.MLP, np.ones(5, dtype=bool),
                     W_c=constant(W_c), W_s=constant(W_s))
        scores = np.array([W_s @ np.maximum(W_c @ np.concatenate([eo[i], query]), 0.0) for i in range(5)])
        expected = np.exp(scores - scores.max())
        expected /= expected.sum()
        np.testing.assert_allclose(row.weights.value, expected, rtol=0, atol=1e-12)

    def test_shift_invariance(self):
        rng = np.random.default_rng(2)
        eo = rng.normal(size=(4, 2))
        query = np.array([0.7, -0.3])
        mask = np.ones(4, dtype=bool)
        tape = Tape()
        base = attend(tape, constant(eo), constant(query), AlignmentKind.DOT, mask).weights.value
        scaled = attend(tape, constant(3.0 * eo), constant(query), AlignmentKind.DOT, mask).weights.value
        self.assertEqual(np.argmax(base), np.argmax(scaled))

    def test_query_state_recorded(self):
        row = attend(Tape(), constant([[0.5]]), constant([1.0]), AlignmentKind.DOT, [True], query_state=4)
        self.assertEqual(row.query_state, 4)
        self.assertTrue(MechanismKind.queries_previous_state(MechanismKind.PRE_RNN))
        self.assertTrue(MechanismKind.queries_previous_state(MechanismKind.FULL_FOCUS))
        self.assertFalse(MechanismKind.queries_previous_state(MechanismKind.POST_RNN))


class TestContext(TestCase):
    def test_one_hot_and_uniform(self):
        eo = np.array([[1.0, 2.0], [3.0, -1.0], [0.5, 0.5]])
        tape = Tape()
        np.testing.assert_array_equal(context_vector(tape, constant([0.0, 1.0, 0.0]), constant(eo)).value, eo[1])
        np.testing.assert_allclose(context_vector(tape, constant(np.full(3, 1 / 3)), constant(eo)).value,
                                   eo.mean(axis=0), atol=1e-15)
        with self.assertRaises(ConfigurationError):
            context_vector(tape, constant([0.5, 0.5]), constant(eo))

    def test_gradients(self):
        rng = np.random.default_rng(8)
        weights = Parameter("weights", rng.uniform(0.1, 1.0, 4))
        eo = Parameter("eo", rng.normal(size=(4, 3)))
        out = rng.normal(size=3)
        error = grad_check(lambda tape: tape.weighted_sum(context_vector(tape, weights, eo), out), [weights, eo])
        self.assertLess(error, 1e-6)


class TestMechanisms(TestCase):
    def test_pre_rnn_input(self):
        tape = Tape()
        self.assertEqual(pre_rnn_input(tape, constant([2.0]), constant([3.0])).value.tolist(), [2.0, 3.0])
        self.assertEqual(pre_rnn_input(tape, constant([1.0, 4.0]), constant(np.zeros(3))).value.tolist(),
                         [1.0, 4.0, 0.0, 0.0, 0.0])

    def test_full_focus_input(self):
        tape = Tape()
        rng = np.random.default_rng(0)
        W_f = constant(rng.normal(size=(2, 5)))
        np.testing.assert_array_equal(full_focus_input(tape, constant(rng.normal(size=3)), constant(np.zeros(2)), W_f).value,
                                      [0.0, 0.0])
        np.testing.assert_array_equal(
            full_focus_input(tape, constant([1.0, 2.0, 3.0]), constant([1.0, -1.0]), constant(np.zeros((2, 5)))).value,
            [0.0, 0.0])
        out = full_focus_input(tape, constant([1.0]), constant([2.0]), constant([[1.0, 1.0]]))
        self.assertEqual(out.value.tolist(), [6.0])
        with self.assertRaises(ConfigurationError):
            full_focus_input(tape, constant([1.0]), constant([2.0]), constant([[1.0, 1.0, 1.0]]))

    def test_full_focus_bound(self):
        rng = np.random.default_rng(5)
        de = rng.normal(size=3)
        c = rng.normal(size=4)
        W_f = rng.normal(size=(4, 7))
        out = full_focus_input(Tape(), constant(de), constant(c), constant(W_f)).value
        gate = np.maximum(W_f @ np.concatenate([de, c]), 0.0)
        self.assertTrue(np.all(np.abs(out) <= np.abs(c) * gate + 1e-15))

    def test_post_rnn_output(self):
        tape = Tape()
        log_probs = post_rnn_output(tape, constant([0.3, -0.1]), constant([1.0, 2.0]), constant(np.zeros((5, 4))))
        np.testing.assert_allclose(log_probs.value, np.full(5, -math.log(5)), atol=1e-15)

        rng = np.random.default_rng(9)
        log_probs = post_rnn_output(tape, constant(rng.normal(size=3)), constant(rng.normal(size=3)),
                                    constant(rng.normal(size=(6, 6))))
        self.assertAlmostEqual(float(np.exp(log_probs.value).sum()), 1.0, delta=1e-12)
        with self.assertRaises(ConfigurationError):
            post_rnn_output(tape, constant([0.3]), constant([1.0]), constant(np.zeros((5, 3))))

    def test_post_rnn_output_gradients(self):
        rng = np.random.default_rng(13)
        do = Parameter("do", rng.normal(size=3))
        c = Parameter("c", rng.normal(size=3))
        W_o = Parameter("W_o", rng.normal(size=(4, 6)))

        def loss(tape):
            return tape.nll_loss(post_rnn_output(tape, do, c, W_o), 2)
        self.assertLess(grad_check(loss, [do, c, W_o]), 1e-5)


if __name__ == "__main__":
    unittest.main()
