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
"""End-to-end properties of the long-form pipeline.

The sweeps run by default. The training checks are marked ``slow`` (run them with
``pytest -m slow``): they train toy models for minutes and assert trends, not absolute error rates.
"""

from __future__ import annotations

import itertools
import pathlib
import time

import numpy as np
import pytest

from lfad.api.config import Config, load_config
from lfad.api.ctc import CtcOutput
from lfad.api.datapipe import make_batches, segment_example
from lfad.api.decode import DecodeConfig, attention_beam_decode, cat_beam_decode
from lfad.api.decoder import Decoder, DecoderConfig
from lfad.api.encoder import Encoder, EncoderConfig
from lfad.api.harness import AblationSpec, EvalMatrix, ablate, corpus_split, train
from lfad.api.masking import MaskSpec, context_profile, is_long_form_segment, required_window
from lfad.api.model import JointModel
from lfad.api.stream import Segment
from lfad.api.tensor import backward, no_grad, numerical_gradient


CONFIGS = pathlib.Path(__file__).absolute().parent.parent / 'configs'


class TestCrossAttentionOrder:
    def test_order_needs_segment_codes(self):
        rng = np.random.default_rng(0)
        worst, changed = 0.0, 0
        for _ in range(100):
            plain = Decoder(DecoderConfig(blocks=1, d=8, heads=2, ff=16, pe_enabled=False), 7, rng)
            coded = Decoder(DecoderConfig(blocks=1, d=8, heads=2, ff=16, pe_enabled=True), 7, rng)
            frames = int(rng.integers(2, 9))
            h = rng.normal(size=(frames, 8))
            inputs = [1, *rng.integers(4, 7, size=int(rng.integers(0, 4))).tolist()]

            permuted = h[rng.permutation(frames)]
            original = plain.forward(plain.prepare_memory(h), inputs).data
            shuffled = plain.forward(plain.prepare_memory(permuted), inputs).data
            worst = max(worst, float(np.abs(original - shuffled).max()))

            i, j = rng.choice(frames, size=2, replace=False)
            swapped = h.copy()
            swapped[[i, j]] = swapped[[j, i]]
            original = coded.forward(coded.prepare_memory(h), inputs).data
            transposed = coded.forward(coded.prepare_memory(swapped), inputs).data
            changed += int(np.abs(original - transposed).max() > 1e-6)
        assert worst <= 1e-12
        assert changed >= 99


def test_joint_loss_gradients_of_every_parameter(tiny_config, tiny_corpus):
    config = Config.from_text(
        'encoder.L = 1\nencoder.d = 8\nencoder.ff = 16\ndecoder.d = 8\ndecoder.ff = 16\n',
        base=tiny_config,
    )
    model = JointModel(config)
    example = segment_example(tiny_corpus[0], 0, config.encoder.R)
    batch = next(make_batches([example], 1, [2], np.random.default_rng(0), config.encoder.R))
    model.zero_grad()
    backward(model.loss(batch).total)
    for name, param in model.named_parameters():
        with no_grad():
            numeric = numerical_gradient(lambda: model.loss(batch).total.item(), param.data)
        analytic = np.zeros_like(numeric) if param.grad is None else param.grad
        # key biases and unused rows have zero gradient up to rounding
        scale = np.linalg.norm(analytic) + np.linalg.norm(numeric)
        assert np.linalg.norm(analytic - numeric) <= 1e-4 * scale + 1e-8, name


class TestLongFormEquivalence:
    def test_random_segments(self):
        rng = np.random.default_rng(1)
        checked = 0
        for _ in range(200):
            if checked == 20:
                break
            config = EncoderConfig(
                L=int(rng.integers(1, 3)),
                N=int(rng.integers(1, 4)),
                M_list=(int(rng.integers(1, 4)),),
                R=int(rng.integers(1, 3)),
                d=8,
                heads=2,
                ff=16,
                feature_dim=4,
                vocab_size=5,
            )
            spec = config.mask_spec()
            encoder = Encoder(config, rng)
            T = int(rng.integers(16, 33))  # noqa: N806
            features = rng.normal(size=(T * config.R, 4))
            t_b = int(rng.integers(0, T))
            segment = Segment(t_b, int(rng.integers(t_b, min(t_b + 4, T))))
            if not is_long_form_segment(context_profile(spec, T), segment):
                continue

            full = encoder.encode(features).values[segment.t_b : segment.t_e + 1]
            start, stop = required_window(spec, segment, n_frames=features.shape[0]).bounds()
            local = encoder.encode(features[start:stop], offset=start // config.R).values
            first = segment.t_b - start // config.R
            np.testing.assert_allclose(local[first : first + len(segment)], full, atol=1e-9)

            # the segment alone lacks its left context
            isolated = encoder.encode(
                features[segment.t_b * config.R : (segment.t_e + 1) * config.R],
                offset=segment.t_b,
            ).values
            assert np.abs(isolated - full).max() > 1e-6
            checked += 1
        assert checked == 20


class TestReceptiveField:
    def test_closed_form(self):
        geometries = itertools.product(range(1, 5), range(1, 5), range(1, 5), range(1, 4))
        for L, N, M, R in geometries:  # noqa: N806
            spec = MaskSpec(L, N, M, R)
            profile = context_profile(spec, 64)
            assert profile.c_left.max() == L * N * R == spec.c_l_max, spec
            assert profile.c_right.max() == M * R == spec.c_r_max, spec

    def test_chunk_anchor_closed_form_needs_aligned_lookback(self):
        for L, N, M in itertools.product(range(1, 5), range(1, 5), range(1, 5)):  # noqa: N806
            spec = MaskSpec(L, N, M, 1, lookback='chunk')
            saturated = context_profile(spec, 64).c_left.max()
            # a look-back ending inside a chunk pulls in that whole chunk at the next layer
            assert (saturated == spec.c_l_max) == (L == 1 or N % M == 0), spec

    def test_full_scale_geometry(self):
        spec = MaskSpec(L=12, N=16, M=16, R=6)
        assert (spec.c_l_max, spec.c_r_max) == (1152, 96)


def test_zero_weight_joint_decoding_is_attention_decoding():
    rng = np.random.default_rng(2)
    decoder = Decoder(DecoderConfig(blocks=1, d=8, heads=2, ff=16, p_max=16), 7, rng)
    cfg = DecodeConfig(mode='cat', alpha=0.0, beam=3, max_tokens=5)
    for _ in range(50):
        frames = int(rng.integers(2, 8))
        h_seg_pe = decoder.prepare_memory(rng.normal(size=(frames, 8)))
        lattice = CtcOutput.from_logits(rng.normal(size=(frames, 7)) * 2.0)
        joint = cat_beam_decode(decoder, h_seg_pe, lattice, cfg)
        attention = attention_beam_decode(decoder, h_seg_pe, cfg)
        assert joint.tokens == attention.tokens


# Training trends ##################################################################################


@pytest.mark.slow
def test_sanity_corpus_is_learnable():
    config = load_config(CONFIGS / 'sanity.cfg')
    result = train(config)
    losses = np.asarray(result.losses)
    windows = losses[: len(losses) // 20 * 20].reshape(20, -1).mean(axis=1)
    assert (np.diff(windows[:4]) < 0.0).all()
    assert windows[-1] < windows[0]
    assert np.mean(result.accuracies[-10:]) >= 0.99


def test_sanity_budget_is_spent_past_warm_up():
    train_cfg = load_config(CONFIGS / 'sanity.cfg').train
    assert 10 * train_cfg.warmup <= train_cfg.updates
    assert not (train_cfg.sc or train_cfg.ac)


@pytest.fixture(scope='module')
def ablation_run():
    base = load_config(CONFIGS / 'toy.cfg')
    spec = AblationSpec(
        models=(0, 2, 3, 4, 5),
        seeds=(0, 1, 2, 3),
        matrix=EvalMatrix(
            encodings=('lfe', 'sfe'),
            modes=('ad', 'cat'),
            segmentations=('oracle', 'semantic', 'vad'),
        ),
    )
    test_corpus = corpus_split(base, 'test', 12)
    start = time.monotonic()
    report = ablate(spec, base, test_corpus=test_corpus, processes=4)
    return report, time.monotonic() - start


@pytest.fixture(scope='module')
def ablation_report(ablation_run):
    return ablation_run[0]


@pytest.mark.slow
class TestAblationTrends:
    def test_no_failures(self, ablation_report):
        assert not ablation_report.failures

    def test_grid_fits_the_time_budget(self, ablation_run):
        _, seconds = ablation_run
        assert seconds < 20 * 60

    def test_untransformed_model_loops_on_long_form_encodings(self, ablation_report):
        median = ablation_report.median
        assert median(0, 'lfe', 'ad', 'oracle', 'trunc_rate') >= 0.5
        short_form = median(0, 'sfe', 'ad', 'oracle', 'ins_ratio')
        assert median(0, 'lfe', 'ad', 'oracle', 'ins_ratio') >= 3.0 * short_form

    def test_transforms_restore_parity(self, ablation_report):
        median = ablation_report.median
        assert abs(median(4, 'lfe', 'ad', 'oracle') - median(4, 'sfe', 'ad', 'oracle')) <= 0.02
        assert median(4, 'lfe', 'ad', 'oracle', 'trunc_rate') <= 0.05

    def test_ordering(self, ablation_report):
        median = ablation_report.median
        best = median(4, 'lfe', 'ad', 'oracle')
        for model in (0, 2, 3):
            assert best < median(model, 'lfe', 'ad', 'oracle'), model
        assert median(5, 'lfe', 'cat', 'semantic') <= median(4, 'lfe', 'cat', 'vad')
