# MIT License
#
# Copyright (c) 2024 Dean Thompson

import unittest

import numpy as np

from lsv_calib.exceptions import InvalidInputError
from lsv_calib.optimizers import AdamState, adam_step, sgd_step


class TestAdam(unittest.TestCase):
    def test_first_step_should_move_by_learning_rate(self):
        # given
        state = AdamState.zeros(3)
        params = np.zeros(3)
        grads = np.array([2.0, -0.5, 1e-3])
        # when
        new_params, new_state = adam_step(state, params, grads, lr=0.01)
        # then
        np.testing.assert_allclose(new_params, -0.01 * np.sign(grads), rtol=1e-4)
        self.assertEqual(new_state.step, 1)

    def test_should_not_modify_inputs(self):
        # given
        state = AdamState.zeros(2)
        params = np.ones(2)
        # when
        adam_step(state, params, np.ones(2), lr=0.1)
        # then
        np.testing.assert_array_equal(params, 1.0)
        np.testing.assert_array_equal(state.m, 0.0)
        self.assertEqual(state.step, 0)

    def test_should_minimize_quadratic(self):
        # given
        target = np.array([1.0, -2.0])
        params, state = np.zeros(2), AdamState.zeros(2)
        # when
        for _ in range(2000):
            params, state = adam_step(state, params, 2.0 * (params - target), lr=0.01)
        # then
        np.testing.assert_allclose(params, target, atol=2e-2)

    def test_zero_gradient_should_keep_parameters(self):
        params, _ = adam_step(AdamState.zeros(2), np.ones(2), np.zeros(2), lr=0.1)
        np.testing.assert_array_equal(params, 1.0)

    def test_should_reject_shape_mismatch(self):
        with self.assertRaises(InvalidInputError):
            adam_step(AdamState.zeros(2), np.ones(3), np.ones(3), lr=0.1)


class TestSgd(unittest.TestCase):
    def test_should_step_against_gradient(self):
        np.testing.assert_allclose(sgd_step(np.array([1.0]), np.array([2.0]), 0.1), [0.8])

    def test_should_reject_shape_mismatch(self):
        with self.assertRaises(InvalidInputError):
            sgd_step(np.ones(2), np.ones(3), 0.1)
