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

import itertools
import math

import numpy as np
import pytest

from lfad.api.ctc import CtcHead, CtcOutput, ctc_greedy, ctc_loss, extract_segments, min_frames
from lfad.api.errors import ContractError, DimensionError, InfeasibleAlignmentError, TokenIndexError
from lfad.api.stream import Segment
from lfad.api.tensor import Parameter, gradient_check
from lfad.api.vocab import BLANK, SEG_END


def random_lattice(rng, frames=4, vocab_size=4):
    return CtcOutput.from_logits(rng.normal(size=(frames, vocab_size)) * 2.0)


def collapse(path):
    tokens, previous = [], None
    for label in path:
        if label != BLANK and label != previous:
            tokens.append(label)
        previous = label
    return tokens


def brute_force_log_likelihood(lattice, target):
    probs = np.exp(lattice.values)
    total = 0.0
    for path in itertools.product(range(lattice.vocab_size), repeat=lattice.n_frames):
        if collapse(path) == list(target):
            total += float(np.prod(probs[np.arange(lattice.n_frames), path]))
    return math.log(total)


class TestCtcOutput:
    def test_rows_must_be_normalized(self):
        with pytest.raises(ContractError):
            CtcOutput(np.zeros((2, 3)))

    def test_matrix_only(self):
        with pytest.raises(DimensionError):
            CtcOutput(np.zeros(3))

    def test_slice(self, rng):
        lattice = random_lattice(rng, frames=6)
        part = lattice.slice(Segment(2, 4))
        assert len(part) == 3
        np.testing.assert_array_equal(part.values, lattice.values[2:5])

    def test_head(self, rng):
        head = CtcHead(6, 5, rng)
        lattice = head.lattice(rng.normal(size=(7, 6)))
        assert (lattice.n_frames, lattice.vocab_size) == (7, 5)
        np.testing.assert_allclose(np.exp(lattice.values).sum(axis=-1), np.ones(7))


class TestCtcLoss:
    @pytest.mark.parametrize('target', [[], [2], [3, 1], [1, 1], [2, 3, 2]])
    def test_matches_alignment_enumeration(self, rng, target):
        lattice = random_lattice(rng, frames=4)
        expected = brute_force_log_likelihood(lattice, target)
        assert -ctc_loss(lattice, target).item() == pytest.approx(expected, rel=1e-10)

    @pytest.mark.parametrize('frames', [1, 2, 3, 4, 5, 6])
    def test_exhaustive_sweep(self, rng, frames):
        lattice = random_lattice(rng, frames=frames)
        probs = np.exp(lattice.values)
        totals = {}
        for path in itertools.product(range(lattice.vocab_size), repeat=frames):
            key = tuple(collapse(path))
            totals[key] = totals.get(key, 0.0) + float(np.prod(probs[np.arange(frames), path]))

        checked = 0
        for length in range(4):
            for target in itertools.product(range(1, lattice.vocab_size), repeat=length):
                if min_frames(target) > frames:
                    continue
                expected = math.log(totals[target])
                loss = ctc_loss(lattice, list(target)).item()
                assert -loss == pytest.approx(expected, rel=1e-10, abs=1e-10)
                checked += 1
        assert checked > 0

    def test_uniform_single_frame(self):
        lattice = CtcOutput(np.log(np.full((1, 4), 0.25)))
        assert ctc_loss(lattice, [2]).item() == pytest.approx(math.log(4))

    def test_gradients(self, rng):
        logits = Parameter(rng.normal(size=(5, 4)), name='logits')
        errors = gradient_check(
            lambda: ctc_loss(CtcOutput.from_logits(logits), [1, 2, 2]),
            [logits],
        )
        assert errors['logits'] < 1e-6

    def test_infeasible(self, rng):
        lattice = random_lattice(rng, frames=3)
        assert min_frames([2, 2, 3]) == 4
        with pytest.raises(InfeasibleAlignmentError):
            ctc_loss(lattice, [2, 2, 3])

    def test_invalid_targets(self, rng):
        lattice = random_lattice(rng)
        with pytest.raises(TokenIndexError):
            ctc_loss(lattice, [7])
        with pytest.raises(ContractError):
            ctc_loss(lattice, [BLANK])


class TestGreedy:
    def test_collapse_and_frames(self):
        a = 4
        path = ctc_greedy(CtcOutput(np.log(np.eye(5)[[a, a, BLANK, a]] * 0.95 + 0.01)))
        assert path.tokens == [4, 4]
        assert path.frames == [0, 3]

    def test_all_blank(self):
        path = ctc_greedy(CtcOutput(np.log(np.eye(5)[[BLANK] * 3] * 0.95 + 0.01)))
        assert path.tokens == []


class TestExtractSegments:
    def test_split_at_segmentation_tokens(self):
        split = extract_segments([5, SEG_END, 6, SEG_END, 7], [2, 5, 8, 11, 12], n_frames=14)
        assert split.segments == [
            Segment(0, 5, (5,)),
            Segment(6, 11, (6,)),
            Segment(12, 13, (7,), open=True),
        ]
        assert split.dropped == 0

    def test_degenerate_segments_are_dropped(self):
        split = extract_segments([SEG_END, 5, SEG_END, SEG_END], [1, 3, 4, 6], n_frames=7)
        assert split.segments == [Segment(2, 4, (5,))]
        assert split.dropped == 2

    def test_no_segmentation_token(self):
        split = extract_segments([4, 5], [1, 2], n_frames=5)
        assert split.segments == [Segment(0, 4, (4, 5), open=True)]

    def test_segments_partition_the_stream(self):
        split = extract_segments([4, SEG_END, 5, SEG_END, 6], [0, 3, 5, 9, 10], n_frames=12)
        frames = [t for segment in split.segments for t in segment.frames()]
        assert frames == list(range(12))

    def test_contract(self):
        with pytest.raises(ContractError):
            extract_segments([4, 5], [1], n_frames=3)
        with pytest.raises(ContractError):
            extract_segments([4, 5], [2, 1], n_frames=3)
