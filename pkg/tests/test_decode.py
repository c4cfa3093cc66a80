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

import dataclasses
import itertools

import numpy as np
import pytest

from lfad.api.config import Config
from lfad.api.ctc import CtcOutput, ctc_loss, min_frames
from lfad.api.decode import (
    CtcPrefixScorer,
    DecodeConfig,
    attention_beam_decode,
    attention_rescore,
    cat_beam_decode,
    ctc_nbest,
    decode_segment,
    rank_nbest,
    two_pass_decode,
)
from lfad.api.decoder import Decoder, DecoderConfig
from lfad.api.errors import ConfigError, ContractError
from lfad.api.model import JointModel
from lfad.api.stream import AcousticStream, Segment
from lfad.api.tensor import log_softmax
from lfad.api.vocab import BLANK, BOS, EOS, SEG_END


VOCAB_SIZE = 5  # blank, BOS, EOS, segment end and one content token
OUTPUTS = (SEG_END, 4)


@pytest.fixture
def decoder():
    config = DecoderConfig(blocks=1, d=8, heads=2, ff=16, p_max=16)
    return Decoder(config, VOCAB_SIZE, np.random.default_rng(7))


@pytest.fixture
def memory(rng):
    return rng.normal(size=(5, 8))


@pytest.fixture
def lattice(rng):
    return CtcOutput.from_logits(rng.normal(size=(5, VOCAB_SIZE)) * 2.0)


def sequence_log_prob(decoder, h_seg_pe, tokens):
    targets = [*tokens, EOS]
    log_probs = log_softmax(decoder.forward(h_seg_pe, [BOS, *tokens])).data
    return float(log_probs[np.arange(len(targets)), targets].sum())


class TestDecodeConfig:
    @pytest.mark.parametrize(
        'changes',
        [
            {'mode': 'greedy'},
            {'segmentation': 'fixed'},
            {'encodings': 'full'},
            {'beam': 0},
            {'nbest': 0},
            {'max_tokens': 0},
            {'alpha': 1.5},
        ],
    )
    def test_invalid(self, changes):
        with pytest.raises(ConfigError):
            DecodeConfig(**changes)

    def test_token_cap(self):
        assert DecodeConfig().token_cap(6) == 24
        assert DecodeConfig(max_tokens=3).token_cap(6) == 3


class TestCtcPrefixScorer:
    def test_end_of_sequence_score_is_the_sequence_likelihood(self, lattice):
        scorer = CtcPrefixScorer(lattice)
        candidates = np.array([EOS, SEG_END, 4])
        scores, states = scorer.score((), candidates, scorer.initial_state())
        assert scores[0] == pytest.approx(-ctc_loss(lattice, []).item())

        prefix_score = scores[2]
        extended, _ = scorer.score((4,), candidates, states[2])
        assert extended[0] == pytest.approx(-ctc_loss(lattice, [4]).item())
        # a prefix is at least as likely as any of its completions
        assert prefix_score >= extended.max() - 1e-12


class TestCtcNbest:
    def test_best_sequence_matches_enumeration(self, lattice):
        sequences = [
            seq
            for length in range(lattice.n_frames + 1)
            for seq in itertools.product(OUTPUTS, repeat=length)
            if min_frames(seq) <= lattice.n_frames
        ]
        scores = {seq: -ctc_loss(lattice, seq).item() for seq in sequences}
        ranked = sorted(scores, key=scores.get, reverse=True)

        nbest = ctc_nbest(lattice, nbest=3, beam=64)
        assert [tokens for tokens, _ in nbest] == ranked[:3]
        for tokens, score in nbest:
            assert score == pytest.approx(scores[tokens])


class TestAttentionSearch:
    def test_exhaustive_beam_finds_the_best_sequence(self, decoder, memory, lattice):
        h_seg_pe = decoder.prepare_memory(memory)
        sequences = [
            seq for length in range(4) for seq in itertools.product(OUTPUTS, repeat=length)
        ]
        scores = {seq: sequence_log_prob(decoder, h_seg_pe, seq) for seq in sequences}
        best = max(scores, key=scores.get)

        # three tokens and EOS
        cfg = DecodeConfig(mode='ad', beam=16, max_tokens=4)
        ranked = decode_segment(decoder, memory, lattice, cfg)
        finished = [hyp for hyp in ranked if hyp.finished]
        assert finished[0].tokens == best
        assert finished[0].score == pytest.approx(scores[best])

    def test_beam_one_is_greedy(self, decoder, memory):
        h_seg_pe = decoder.prepare_memory(memory)
        tokens = []
        for _ in range(3):
            log_probs = log_softmax(decoder.forward(h_seg_pe, [BOS, *tokens])).data[-1]
            log_probs[[0, BOS]] = -np.inf
            token = int(np.argmax(log_probs))
            if token == EOS:
                break
            tokens.append(token)
        hyp = attention_beam_decode(decoder, h_seg_pe, DecodeConfig(beam=1, max_tokens=3))
        assert list(hyp.tokens) == tokens

    def test_truncation(self, decoder, memory):
        decoder.output.bias.data[EOS] = -50.0
        h_seg_pe = decoder.prepare_memory(memory)
        hyp = attention_beam_decode(decoder, h_seg_pe, DecodeConfig(max_tokens=2))
        assert hyp.truncated and not hyp.finished
        assert len(hyp.tokens) == 2

    def test_immediate_end(self, decoder, memory):
        decoder.output.bias.data[EOS] = 50.0
        h_seg_pe = decoder.prepare_memory(memory)
        hyp = attention_beam_decode(decoder, h_seg_pe, DecodeConfig(max_tokens=2))
        assert hyp.finished and hyp.tokens == ()


class TestJointSearch:
    def test_zero_ctc_weight_is_attention_search(self, decoder, memory, lattice):
        h_seg_pe = decoder.prepare_memory(memory)
        cfg = DecodeConfig(mode='cat', alpha=0.0, beam=3, max_tokens=4)
        joint = cat_beam_decode(decoder, h_seg_pe, lattice, cfg)
        attention = attention_beam_decode(decoder, h_seg_pe, cfg)
        assert joint.tokens == attention.tokens
        assert joint.score == pytest.approx(attention.score)

    def test_full_ctc_weight_needs_no_decoder(self, lattice):
        cfg = DecodeConfig(mode='cat', alpha=1.0, beam=64, max_tokens=lattice.n_frames + 1)
        hyp = cat_beam_decode(None, None, lattice, cfg)
        best_tokens, best_score = ctc_nbest(lattice, nbest=1, beam=64)[0]
        assert hyp.tokens == best_tokens
        assert hyp.score == pytest.approx(best_score)

    def test_joint_score_mixes_both(self, decoder, memory, lattice):
        cfg = DecodeConfig(mode='cat', alpha=0.3, beam=4, max_tokens=4)
        hyp = cat_beam_decode(decoder, decoder.prepare_memory(memory), lattice, cfg)
        assert hyp.score == pytest.approx(0.7 * hyp.attention + 0.3 * hyp.ctc)

    def test_token_cap_counts_end_of_sequence(self):
        logits = np.zeros((4, VOCAB_SIZE))
        logits[[0, 1, 2, 3], [4, BLANK, SEG_END, BLANK]] = 10.0
        lattice = CtcOutput.from_logits(logits)
        cfg = DecodeConfig(mode='cat', alpha=1.0, max_tokens=3)

        at_cap = cat_beam_decode(None, None, lattice, cfg)
        assert at_cap.finished and not at_cap.truncated
        assert at_cap.tokens == (4, SEG_END)

        below_cap = cat_beam_decode(None, None, lattice, dataclasses.replace(cfg, max_tokens=2))
        assert below_cap.truncated and not below_cap.finished
        assert below_cap.tokens == (4, SEG_END)


class TestRescoring:
    def test_weight_one_keeps_the_ctc_order(self, decoder, memory):
        nbest = [((4,), -1.0), ((SEG_END,), -2.0), ((4, SEG_END), -3.0)]
        ranked = rank_nbest(decoder, nbest, decoder.prepare_memory(memory), weight=1.0)
        assert [hyp.tokens for hyp in ranked] == [(4,), (SEG_END,), (4, SEG_END)]

    def test_weight_zero_uses_attention_only(self, decoder, memory):
        h_seg_pe = decoder.prepare_memory(memory)
        nbest = [((4,), -1.0), ((SEG_END,), -2.0), ((4, SEG_END), -3.0)]
        best = attention_rescore(decoder, nbest, h_seg_pe, weight=0.0)
        expected = max(
            (tokens for tokens, _ in nbest),
            key=lambda tokens: sequence_log_prob(decoder, h_seg_pe, tokens),
        )
        assert best.tokens == expected

    def test_empty_list(self, decoder, memory):
        with pytest.raises(ContractError):
            rank_nbest(decoder, [], memory, weight=0.5)


class TestTwoPassDecode:
    def test_oracle_segments_encode_once(self, tiny_model, tiny_corpus):
        stream = tiny_corpus[0]
        cfg = DecodeConfig(mode='cat', segmentation='oracle', beam=2, max_tokens=6)
        transcript = two_pass_decode(stream, tiny_model, cfg)
        assert tiny_model.encoder.forward_calls == 1
        starts = [result.segment.t_b for result in transcript.segments]
        assert starts == [segment.t_b for segment in stream.segments]
        assert transcript.failures == 0
        assert all(isinstance(token, int) for token in transcript.tokens)

    def test_isolated_segments_reencode(self, tiny_model, tiny_corpus):
        stream = tiny_corpus[0]
        cfg = DecodeConfig(mode='ad', segmentation='oracle', encodings='sfe', beam=1, max_tokens=4)
        transcript = two_pass_decode(stream, tiny_model, cfg)
        assert tiny_model.encoder.forward_calls == 1 + len(stream.segments)
        assert len(transcript.segments) == len(stream.segments)

    def test_workers_do_not_change_the_result(self, tiny_model, tiny_corpus):
        stream = tiny_corpus[1]
        cfg = DecodeConfig(mode='ar', segmentation='oracle', beam=2, nbest=2)
        serial = two_pass_decode(stream, tiny_model, cfg)
        parallel = two_pass_decode(stream, tiny_model, dataclasses.replace(cfg, workers=3))
        assert serial.tokens == parallel.tokens

    def test_failed_segments_are_skipped(self, tiny_config, tiny_corpus):
        config = Config.from_mapping({'decoder.p_max': 1}, base=tiny_config)
        model = JointModel(config)
        stream = tiny_corpus[0]
        cfg = DecodeConfig(mode='ad', segmentation='oracle', max_tokens=2)
        transcript = two_pass_decode(stream, model, cfg)
        assert transcript.failures == len(stream.segments)
        assert transcript.tokens == []

    def test_oracle_needs_reference_segments(self, tiny_model, rng):
        stream = AcousticStream(rng.normal(size=(20, 8)), id='bare')
        with pytest.raises(ContractError):
            two_pass_decode(stream, tiny_model, DecodeConfig(segmentation='oracle'))

    def test_vad_segmentation(self, tiny_model, tiny_corpus):
        cfg = DecodeConfig(segmentation='vad', max_tokens=2)
        transcript = two_pass_decode(tiny_corpus[2], tiny_model, cfg)
        segments = [result.segment for result in transcript.segments]
        assert segments
        assert all(isinstance(segment, Segment) for segment in segments)
        assert all(segment.transcript is None for segment in segments)
