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

import copy
import pickle
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

from lfad.api.encoder import Encoder, EncoderConfig, rotary_positions
from lfad.api.errors import AlignmentError, ConfigError, DimensionError, TooShortInputError
from lfad.api.masking import required_window
from lfad.api.stream import AcousticStream, Segment
from lfad.api.tensor import gradient_check


@pytest.fixture
def encoder(tiny_config):
    return Encoder(tiny_config.encoder, np.random.default_rng(0))


@pytest.fixture
def features(rng):
    return rng.normal(size=(40, 8))


class TestEncoderConfig:
    def test_default_chunk_size(self):
        config = EncoderConfig(M_list=(4, 8))
        assert config.mask_spec().M == 4
        assert config.mask_spec(8).M == 8

    @pytest.mark.parametrize(
        'changes',
        [{'M_list': ()}, {'d': 30, 'heads': 4}, {'d': 12, 'heads': 4}, {'vocab_size': 4}, {'R': 0}],
    )
    def test_invalid(self, changes):
        with pytest.raises(ConfigError):
            EncoderConfig(**changes)


class TestFrontend:
    def test_decimation(self, encoder, features):
        out = encoder.downsample_frontend(features[:23])
        assert out.shape == (11, encoder.config.d)

    def test_too_short(self, encoder):
        with pytest.raises(TooShortInputError):
            encoder.downsample_frontend(np.zeros((1, 8)))

    def test_feature_dimension(self, encoder):
        with pytest.raises(DimensionError):
            encoder.downsample_frontend(np.zeros((4, 5)))


class TestRotaryPositions:
    def test_position_zero_is_identity(self, rng):
        q = rng.normal(size=(1, 4))
        rotated, _ = rotary_positions(q, q, 0)
        np.testing.assert_allclose(rotated.data, q)

    def test_scores_are_shift_invariant(self, rng):
        q, k = rng.normal(size=(5, 8)), rng.normal(size=(7, 8))
        scores = []
        for offset in (0, 13):
            rotated_q, rotated_k = rotary_positions(q, k, offset, offset + 2)
            scores.append(rotated_q.data @ rotated_k.data.T)
        np.testing.assert_allclose(scores[0], scores[1], atol=1e-10)

    def test_array_offsets(self, rng):
        q = rng.normal(size=(3, 4))
        by_int, _ = rotary_positions(q, q, 5)
        by_array, _ = rotary_positions(q, q, np.array([5, 6, 7]))
        np.testing.assert_allclose(by_int.data, by_array.data)

    def test_odd_head_dimension(self):
        with pytest.raises(ConfigError):
            rotary_positions(np.ones((2, 3)), np.ones((2, 3)))


class TestEncoder:
    def test_encode_shapes_and_profile(self, encoder, features):
        encodings = encoder.encode(AcousticStream(features))
        assert len(encodings) == 20
        assert encodings.values.shape == (20, encoder.config.d)
        assert encodings.profile.n_frames == 20
        assert encoder.forward_calls == 1

    def test_forward_calls_are_counted_across_threads(self, encoder, features):
        with ThreadPoolExecutor(max_workers=4) as executor:
            list(executor.map(lambda _: encoder.encode(features[:8]), range(16)))
        assert encoder.forward_calls == 16

        clone = copy.deepcopy(encoder)
        clone.encode(features[:8])
        assert (encoder.forward_calls, clone.forward_calls) == (16, 17)
        assert pickle.loads(pickle.dumps(encoder)).forward_calls == 16

    def test_future_chunks_are_invisible(self, encoder, features):
        full = encoder.encode(features).values
        # 8 encoding frames end on a chunk boundary (chunk size 2)
        prefix = encoder.encode(features[:16]).values
        np.testing.assert_allclose(prefix, full[:8], atol=1e-10)

    def test_long_form_window_reproduces_stream_encodings(self, encoder, features):
        full = encoder.encode(features).values
        segment = Segment(10, 12)
        window = required_window(encoder.config.mask_spec(), segment, n_frames=features.shape[0])
        start, stop = window.bounds()
        assert not window.clipped
        local = encoder.encode(features[start:stop], offset=start // encoder.config.R).values
        first = segment.t_b - start // encoder.config.R
        np.testing.assert_allclose(local[first : first + len(segment)], full[10:13], atol=1e-10)

    def test_short_window_differs(self, encoder, features):
        full = encoder.encode(features).values
        isolated = encoder.encode(features[20:26], offset=10).values
        assert not np.allclose(isolated, full[10:13])

    def test_padding_never_leaks(self, encoder, rng):
        short, long = rng.normal(size=(12, 8)), rng.normal(size=(20, 8))
        batch = np.zeros((2, 20, 8))
        batch[0, :12], batch[1] = short, long
        out = encoder(batch, frame_counts=[6, 10], offsets=[0, 0]).data
        np.testing.assert_allclose(out[0, :6], encoder.encode(short).values, atol=1e-10)
        np.testing.assert_allclose(out[1], encoder.encode(long).values, atol=1e-10)

    def test_chunk_size_override(self, encoder, features):
        small = encoder.encode(features, chunk_size=2).values
        large = encoder.encode(features, chunk_size=4).values
        assert not np.allclose(small, large)

    def test_gradients(self, tiny_config, rng):
        encoder = Encoder(tiny_config.encoder, np.random.default_rng(3))
        x = rng.normal(size=(12, 8))
        params = [
            encoder.frontend.weight,
            encoder.blocks[0].mixing.w_next,
            encoder.blocks[1].attn.w_q.weight,
        ]
        errors = gradient_check(lambda: (encoder(x[None]) ** 2).mean(), params)
        assert max(errors.values()) < 1e-4


class TestStreamingEncoder:
    def test_matches_full_encoding(self, encoder, features):
        full = encoder.encode(features).values
        streamed = encoder.streaming_encode([features[:8], features[8:24], features[24:]])
        assert encoder.forward_calls == 2
        np.testing.assert_allclose(streamed.values, full, atol=1e-10)

    def test_matches_with_offset(self, encoder, features):
        full = encoder.encode(features, offset=4).values
        streamed = encoder.streaming_encode([features[:4], features[4:]], offset=4)
        np.testing.assert_allclose(streamed.values, full, atol=1e-10)

    def test_misaligned_chunk(self, encoder, features):
        with pytest.raises(AlignmentError):
            encoder.streaming_encode([features[:6], features[6:]])

    def test_misaligned_offset(self, encoder, features):
        with pytest.raises(AlignmentError):
            encoder.streaming_encode([features], offset=1)

    def test_nothing_to_encode(self, encoder):
        with pytest.raises(TooShortInputError):
            encoder.streaming_encode([np.zeros((1, 8))])
