# This file is part of lfad, long-form attention decoding on a desk-scale speech model.
#
# Copyright 2024 The lfad Authors. All Rights Reserved.
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#     http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.
# ==============================================================================
from __future__ import annotations

import math

import numpy as np
import pytest

from lfad.api.errors import DimensionError, TokenIndexError
from lfad.api.tensor import (
    AdamState,
    Parameter,
    Tensor,
    adam_step,
    backward,
    clip_grad_norm,
    concat,
    cross_entropy,
    gradient_check,
    is_grad_enabled,
    layer_norm,
    log_softmax,
    logsumexp,
    no_grad,
    softmax,
    stack,
    swish,
    take,
    where,
)


TOLERANCE = 1e-6


class TestGradients:
    """Analytic gradients agree with central finite differences."""

    def test_matmul_and_broadcast_add(self, rng):
        a = Parameter(rng.normal(size=(3, 4)), name='a')
        b = Parameter(rng.normal(size=(4, 2)), name='b')
        c = Parameter(rng.normal(size=(2,)), name='c')
        errors = gradient_check(lambda: ((a @ b + c) ** 2).sum(), [a, b, c])
        assert max(errors.values()) < TOLERANCE

    def test_softmax_family(self, rng):
        x = Parameter(rng.normal(size=(2, 5)), name='x')
        weights = rng.normal(size=(2, 5))
        assert gradient_check(lambda: (softmax(x) * weights).sum(), [x])['x'] < TOLERANCE
        assert gradient_check(lambda: (log_softmax(x) * weights).sum(), [x])['x'] < TOLERANCE
        assert gradient_check(lambda: logsumexp(x).sum(), [x])['x'] < TOLERANCE

    def test_layer_norm(self, rng):
        x = Parameter(rng.normal(size=(3, 6)), name='x')
        gain = Parameter(rng.normal(size=(6,)), name='gain')
        bias = Parameter(rng.normal(size=(6,)), name='bias')
        weights = rng.normal(size=(3, 6))
        errors = gradient_check(
            lambda: (layer_norm(x, gain, bias) * weights).sum(),
            [x, gain, bias],
        )
        assert max(errors.values()) < 1e-5

    def test_indexing_and_gathers(self, rng):
        table = Parameter(rng.normal(size=(5, 3)), name='table')
        indices = np.array([0, 2, 2, 4])
        weights = rng.normal(size=(4, 3))
        errors = gradient_check(lambda: (take(table, indices) * weights).sum(), [table])
        assert errors['table'] < TOLERANCE
        errors = gradient_check(lambda: (table[1:4] * weights[:3]).sum(), [table])
        assert errors['table'] < TOLERANCE

    def test_concat_stack_where(self, rng):
        a = Parameter(rng.normal(size=(2, 3)), name='a')
        b = Parameter(rng.normal(size=(2, 3)), name='b')
        condition = np.array([[True, False, True], [False, False, True]])
        errors = gradient_check(
            lambda: (
                (concat([a, b], axis=0) ** 2).sum()
                + stack([a, b]).mean()
                + where(condition, a, b).sum()
            ),
            [a, b],
        )
        assert max(errors.values()) < TOLERANCE

    def test_swish(self, rng):
        x = Parameter(rng.normal(size=(7,)), name='x')
        assert gradient_check(lambda: swish(x).sum(), [x])['x'] < TOLERANCE

    def test_cross_entropy(self, rng):
        logits = Parameter(rng.normal(size=(4, 6)), name='logits')
        targets = np.array([1, 5, -100, 0])
        errors = gradient_check(lambda: cross_entropy(logits, targets), [logits])
        assert errors['logits'] < TOLERANCE


class TestCrossEntropy:
    """Mean negative log-likelihood over non-ignored positions."""

    def test_uniform_logits(self):
        loss = cross_entropy(Tensor(np.zeros((3, 4))), [0, 1, 3])
        assert loss.item() == pytest.approx(math.log(4))

    def test_ignored_positions_do_not_count(self):
        logits = Tensor(np.array([[10.0, 0.0], [0.0, 0.0]]))
        full = cross_entropy(logits[1:], [1]).item()
        assert cross_entropy(logits, [-100, 1]).item() == pytest.approx(full)

    def test_out_of_range_target(self):
        with pytest.raises(TokenIndexError):
            cross_entropy(Tensor(np.zeros((2, 4))), [0, 4])

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            cross_entropy(Tensor(np.zeros((2, 4))), [0, 1, 2])


class TestGradMode:
    def test_no_grad_builds_no_graph(self, rng):
        x = Parameter(rng.normal(size=(3,)))
        assert is_grad_enabled()
        with no_grad():
            assert not is_grad_enabled()
            y = (x * 2.0).sum()
        assert is_grad_enabled()
        backward(y)
        assert x.grad is None

    def test_gradients_accumulate_over_shared_use(self):
        x = Parameter(np.array([1.0, 2.0]))
        backward((x * x).sum() + (x * 3.0).sum())
        np.testing.assert_allclose(x.grad, [5.0, 7.0])


class TestOptimizer:
    def test_first_adam_step_moves_by_learning_rate(self):
        param = Parameter(np.array([1.0, -1.0, 0.5]), name='w')
        grads = [np.array([0.3, -2.0, 1e-3])]
        state = adam_step([param], grads, AdamState(), lr=0.1)
        # the bias-corrected first step is lr * sign(g) up to eps
        np.testing.assert_allclose(param.data, [0.9, -0.9, 0.4], atol=1e-4)
        assert state.step == 1
        assert set(state.m) == {'w'}

    def test_missing_gradient_is_zero(self):
        param = Parameter(np.ones(2), name='w')
        adam_step([param], [None], AdamState(), lr=0.1)
        np.testing.assert_allclose(param.data, np.ones(2))

    def test_wrong_gradient_shape(self):
        param = Parameter(np.ones(2), name='w')
        with pytest.raises(DimensionError):
            adam_step([param], [np.ones(3)], AdamState(), lr=0.1)

    def test_clip_grad_norm(self):
        a, b = Parameter(np.zeros(1)), Parameter(np.zeros(1))
        a.grad, b.grad = np.array([3.0]), np.array([4.0])
        assert clip_grad_norm([a, b], max_norm=1.0) == pytest.approx(5.0)
        np.testing.assert_allclose(np.concatenate([a.grad, b.grad]), [0.6, 0.8], rtol=1e-9)

    def test_clip_below_threshold_is_noop(self):
        a = Parameter(np.zeros(2))
        a.grad = np.array([0.1, 0.1])
        clip_grad_norm([a], max_norm=1.0)
        np.testing.assert_allclose(a.grad, [0.1, 0.1])
