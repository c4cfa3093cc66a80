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
"""Second-pass decoding: attention rescoring, attention beam search, joint CTC-attention search.

All three modes share one beam search over :class:`Hypothesis` objects. :func:`two_pass_decode`
runs the whole pipeline on a stream: encode once, segment from the CTC first pass (or a VAD or
the reference), then decode every segment from a slice of the stream encodings.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, NamedTuple, Sequence

import numpy as np

from lfad.api.ctc import CtcOutput, ctc_greedy, extract_segments
from lfad.api.datapipe import simulated_vad
from lfad.api.decoder import Decoder, DecoderState
from lfad.api.errors import ConfigError, ContractError, LfadError
from lfad.api.stream import AcousticStream, Segment
from lfad.api.tensor import Tensor, log_softmax, no_grad
from lfad.api.vocab import BLANK, BOS, EOS, SEG_END, strip_special


if TYPE_CHECKING:
    from lfad.api.model import JointModel


__all__ = [
    'MODES',
    'SEGMENTATIONS',
    'ENCODINGS',
    'DecodeConfig',
    'Hypothesis',
    'CtcPrefixScorer',
    'attention_beam_decode',
    'cat_beam_decode',
    'ctc_nbest',
    'rank_nbest',
    'attention_rescore',
    'decode_segment',
    'SegmentResult',
    'Transcript',
    'two_pass_decode',
]


LOGGER = logging.getLogger(__name__)

MODES = ('ar', 'ad', 'cat')
SEGMENTATIONS = ('semantic', 'vad', 'oracle')
ENCODINGS = ('lfe', 'sfe')


@dataclass(frozen=True)
class DecodeConfig:  # pylint: disable=too-many-instance-attributes
    """Second-pass decoding options.

    ``max_tokens`` caps the emitted tokens of a segment, EOS included, and defaults to four per
    segment encoding frame. ``alpha`` weighs the CTC score in joint decoding and attention
    rescoring. ``encodings='lfe'`` slices the stream encodings; ``'sfe'`` re-encodes every segment
    in isolation.
    """

    mode: str = 'ad'
    beam: int = 4
    max_tokens: int | None = None
    alpha: float = 0.3
    length_penalty: float = 0.0
    segmentation: str = 'semantic'
    nbest: int = 4
    encodings: str = 'lfe'
    chunk_size: int | None = None
    workers: int = 1
    vad_threshold: float = 0.5
    vad_jitter: int = 2
    vad_seed: int = 0
    vad_min_gap: int = 2

    def __post_init__(self) -> None:
        """Validate the options."""
        if self.mode not in MODES:
            raise ConfigError(f'Unknown decode.mode {self.mode!r}, expected one of {MODES}')
        if self.segmentation not in SEGMENTATIONS:
            raise ConfigError(
                f'Unknown decode.segmentation {self.segmentation!r}, '
                f'expected one of {SEGMENTATIONS}',
            )
        if self.encodings not in ENCODINGS:
            raise ConfigError(
                f'Unknown decode.encodings {self.encodings!r}, expected one of {ENCODINGS}',
            )
        if self.beam < 1 or self.nbest < 1 or self.workers < 1:
            raise ConfigError('decode.beam, decode.nbest and decode.workers must be positive')
        if self.max_tokens is not None and self.max_tokens < 1:
            raise ConfigError(f'decode.max_tokens must be positive, got {self.max_tokens}')
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f'decode.alpha must lie in [0, 1], got {self.alpha}')

    def token_cap(self, n_frames: int) -> int:
        """Return the token cap for a segment of ``n_frames`` encoding frames."""
        return self.max_tokens if self.max_tokens is not None else max(4 * n_frames, 1)


@dataclass(frozen=True)
class Hypothesis:  # pylint: disable=too-many-instance-attributes
    """A (partial) output sequence with its scores.

    ``tokens`` never contains BOS or EOS. ``finished`` marks an EOS-terminated sequence;
    ``truncated`` marks a search stopped by the token cap while this hypothesis still outranked
    every finished one.
    """

    tokens: tuple[int, ...] = ()
    attention: float = 0.0
    ctc: float = 0.0
    score: float = 0.0
    finished: bool = False
    truncated: bool = False
    state: DecoderState | None = field(default=None, repr=False, compare=False)
    ctc_state: np.ndarray | None = field(default=None, repr=False, compare=False)

    def content(self) -> list[int]:
        """Return the tokens without segmentation tokens."""
        return strip_special(self.tokens)


class CtcPrefixScorer:
    """Label-synchronous CTC prefix scores over a lattice.

    The state of a prefix ``g`` holds, for every frame ``t``, the log-probabilities of having
    emitted ``g`` by frame ``t`` ending in a non-blank (column 0) or a blank (column 1). The
    score of a candidate ``c`` is the probability that the collapsed output starts with
    ``g + c``; for EOS it is the probability that the output equals ``g``.
    """

    def __init__(self, lattice: CtcOutput, eos: int = EOS) -> None:
        """Bind the scorer to a lattice."""
        self.x = lattice.values
        self.blank = lattice.blank
        self.eos = eos
        self.n_frames = lattice.n_frames

    def initial_state(self) -> np.ndarray:
        """Return the state of the empty prefix: blanks only."""
        state = np.full((self.n_frames, 2), -np.inf)
        state[:, 1] = np.cumsum(self.x[:, self.blank])
        return state

    def score(
        self,
        prefix: Sequence[int],
        candidates: np.ndarray,
        state: np.ndarray,
    ) -> tuple[np.ndarray, np.ndarray]:
        """Score every candidate extension of ``prefix``.

        Returns:
            The prefix scores ``(C,)`` and the extended states ``(C, T, 2)``.
        """
        candidates = np.asarray(candidates, dtype=np.int64)
        n_frames, n_prefix = self.n_frames, len(prefix)
        xs = self.x[:, candidates]
        r = np.full((n_frames, 2, candidates.size), -np.inf)
        with np.errstate(divide='ignore', invalid='ignore', under='ignore'):
            if n_prefix == 0:
                r[0, 0] = xs[0]
            r_sum = np.logaddexp(state[:, 0], state[:, 1])
            log_phi = np.repeat(r_sum[:, None], candidates.size, axis=1)
            if n_prefix > 0:
                log_phi[:, candidates == prefix[-1]] = state[:, 1:2]

            start = max(n_prefix, 1)
            log_psi = r[start - 1, 0].copy()
            for t in range(start, n_frames):
                r[t, 0] = np.logaddexp(r[t - 1, 0], log_phi[t - 1]) + xs[t]
                r[t, 1] = np.logaddexp(r[t - 1, 0], r[t - 1, 1]) + self.x[t, self.blank]
                log_psi = np.logaddexp(log_psi, log_phi[t - 1] + xs[t])
        log_psi[candidates == self.eos] = r_sum[-1]
        log_psi[candidates == self.blank] = -np.inf
        return log_psi, np.moveaxis(r, 2, 0)


class _Candidate(NamedTuple):
    score: float
    parent: Hypothesis
    token: int
    attention: float
    ctc: float
    ctc_state: np.ndarray | None
    state: DecoderState | None


def _finish(candidate: _Candidate) -> Hypothesis:
    return Hypothesis(
        candidate.parent.tokens,
        candidate.attention,
        candidate.ctc,
        candidate.score,
        finished=True,
    )


def _rank_key(hyp: Hypothesis) -> tuple[float, tuple[int, ...]]:
    return -hyp.score, hyp.tokens


# pylint: disable-next=too-many-arguments,too-many-locals,too-many-branches
def _beam_search(
    decoder: Decoder | None,
    memory: Tensor | np.ndarray | None,
    lattice: CtcOutput | None,
    alpha: float,
    beam: int,
    max_tokens: int,
    length_penalty: float = 0.0,
) -> list[Hypothesis]:
    """Return the finished hypotheses ranked best first.

    A truncated hypothesis leads the list when the token cap was hit before any better ending.
    """
    if alpha < 1.0 and decoder is None:
        raise ContractError('Attention scores need a decoder')
    if alpha > 0.0 and lattice is None:
        raise ContractError('CTC prefix scores need a lattice')

    scorer = CtcPrefixScorer(lattice) if alpha > 0.0 and lattice is not None else None
    if decoder is not None:
        vocab_size = decoder.vocab_size
    else:
        vocab_size = lattice.vocab_size  # type: ignore[union-attr]
    candidates = np.array([token for token in range(vocab_size) if token not in (BLANK, BOS)])

    live = [
        Hypothesis(
            state=None if decoder is None else decoder.init_state(memory),  # type: ignore[arg-type]
            ctc_state=scorer.initial_state() if scorer is not None else None,
        ),
    ]
    ended: list[Hypothesis] = []
    truncated: Hypothesis | None = None

    # the cap counts EOS: a finished hypothesis holds at most `max_tokens - 1` tokens
    for step in range(max_tokens):
        pool: list[_Candidate] = []
        for hyp in live:
            if decoder is not None:
                previous = hyp.tokens[-1] if hyp.tokens else BOS
                logits, state = decoder.decode_step(hyp.state, previous)  # type: ignore[arg-type]
                attention = log_softmax(Tensor(logits)).data[candidates]
            else:
                attention, state = np.zeros(candidates.size), None
            if scorer is not None:
                ctc_scores, ctc_states = scorer.score(
                    hyp.tokens,
                    candidates,
                    hyp.ctc_state,  # type: ignore[arg-type]
                )
            else:
                ctc_scores, ctc_states = np.zeros(candidates.size), None
            for index, token in enumerate(candidates.tolist()):
                att = hyp.attention + float(attention[index])
                ctc = float(ctc_scores[index])
                score = (1.0 - alpha) * att if alpha < 1.0 else 0.0
                if alpha > 0.0:
                    score += alpha * ctc
                score += length_penalty * (len(hyp.tokens) + (token != EOS))
                if not np.isfinite(score):
                    continue
                pool.append(
                    _Candidate(
                        score,
                        hyp,
                        token,
                        att,
                        ctc,
                        ctc_states[index] if ctc_states is not None else None,
                        state,
                    ),
                )

        if step == max_tokens - 1:
            ended.extend(_finish(c) for c in pool if c.token == EOS)
            extensions = [c for c in pool if c.token != EOS]
            best_extension = max(extensions, key=lambda c: c.score, default=None)
            best_ended = max((hyp.score for hyp in ended), default=-np.inf)
            if best_extension is not None and best_extension.score > best_ended:
                truncated = Hypothesis(
                    (*best_extension.parent.tokens, best_extension.token),
                    best_extension.attention,
                    best_extension.ctc,
                    best_extension.score,
                    finished=False,
                    truncated=True,
                )
            break

        pool.sort(key=lambda c: (-c.score, (*c.parent.tokens, c.token)))
        selected = pool[:beam]
        ended.extend(_finish(c) for c in selected if c.token == EOS)
        live = [
            Hypothesis(
                (*c.parent.tokens, c.token),
                c.attention,
                c.ctc,
                c.score,
                state=c.state,
                ctc_state=c.ctc_state,
            )
            for c in selected
            if c.token != EOS
        ]
        if not live:
            break
        # scores only decrease along a prefix: stop once the top `beam` ended ones are final
        if length_penalty == 0.0 and len(ended) >= beam:
            if sorted((h.score for h in ended), reverse=True)[beam - 1] >= live[0].score:
                break

    ranked = sorted(ended, key=_rank_key)
    if truncated is not None:
        ranked.insert(0, truncated)
    return ranked


def attention_beam_decode(
    decoder: Decoder,
    h_seg_pe: Tensor | np.ndarray,
    cfg: DecodeConfig,
) -> Hypothesis:
    """Autoregressive attention beam search over one segment memory (codes already injected).

    Stops on EOS or at the token cap; a capped search returns a hypothesis flagged ``truncated``.
    """
    n_frames = np.shape(h_seg_pe.data if isinstance(h_seg_pe, Tensor) else h_seg_pe)[-2]
    ranked = _beam_search(
        decoder,
        h_seg_pe,
        None,
        0.0,
        cfg.beam,
        cfg.token_cap(n_frames),
        cfg.length_penalty,
    )
    return ranked[0] if ranked else Hypothesis(truncated=True)


def cat_beam_decode(
    decoder: Decoder | None,
    h_seg_pe: Tensor | np.ndarray | None,
    lattice: CtcOutput,
    cfg: DecodeConfig,
) -> Hypothesis:
    """Joint CTC-attention beam search: ``score = (1 - alpha) * attention + alpha * ctc_prefix``.

    With ``alpha == 0`` the search is the attention beam search token for token; with
    ``alpha == 1`` no decoder is needed.
    """
    ranked = _beam_search(
        decoder,
        h_seg_pe,
        lattice,
        cfg.alpha,
        cfg.beam,
        cfg.token_cap(lattice.n_frames),
        cfg.length_penalty,
    )
    return ranked[0] if ranked else Hypothesis(truncated=True)


def ctc_nbest(
    lattice: CtcOutput,
    nbest: int,
    beam: int | None = None,
) -> list[tuple[tuple[int, ...], float]]:
    """Return up to ``nbest`` complete sequences from a CTC prefix beam search, best first.

    Each entry is ``(tokens, log P_ctc(tokens))``.
    """
    # up to one token per frame, plus EOS
    cap = lattice.n_frames + 1
    ranked = _beam_search(None, None, lattice, 1.0, max(beam or nbest, nbest), cap)
    return [(hyp.tokens, hyp.ctc) for hyp in ranked if hyp.finished][:nbest]


def _sequence_log_prob(
    decoder: Decoder,
    memory: Tensor | np.ndarray,
    tokens: Sequence[int],
) -> float:
    targets = [*tokens, EOS]
    logits = decoder.forward(memory, [BOS, *tokens])
    log_probs = log_softmax(logits, axis=-1).data
    return float(log_probs[np.arange(len(targets)), targets].sum())


def rank_nbest(
    decoder: Decoder,
    nbest: Sequence[tuple[Sequence[int], float]],
    h_seg_pe: Tensor | np.ndarray,
    weight: float,
) -> list[Hypothesis]:
    """Re-rank first-pass candidates by ``weight * ctc + (1 - weight) * log P_att(tokens + EOS)``.

    Raises:
        ContractError:
            If ``nbest`` is empty.
    """
    if not nbest:
        raise ContractError('Attention rescoring needs at least one candidate')
    hypotheses = []
    with no_grad():
        for tokens, ctc in nbest:
            tokens = tuple(int(token) for token in tokens)
            attention = _sequence_log_prob(decoder, h_seg_pe, tokens)
            score = weight * float(ctc) + (1.0 - weight) * attention
            hypotheses.append(Hypothesis(tokens, attention, float(ctc), score, finished=True))
    return sorted(hypotheses, key=_rank_key)


def attention_rescore(
    decoder: Decoder,
    nbest: Sequence[tuple[Sequence[int], float]],
    h_seg_pe: Tensor | np.ndarray,
    weight: float,
) -> Hypothesis:
    """Return the best candidate of a first-pass n-best list after attention rescoring."""
    return rank_nbest(decoder, nbest, h_seg_pe, weight)[0]


def decode_segment(
    decoder: Decoder,
    memory: Tensor,
    lattice: CtcOutput,
    cfg: DecodeConfig,
) -> list[Hypothesis]:
    """Inject the segment codes into ``memory`` and return the ranked hypotheses of ``cfg.mode``."""
    with no_grad():
        h_seg_pe = decoder.prepare_memory(memory)
        if cfg.mode == 'ar':
            nbest = ctc_nbest(lattice, cfg.nbest, cfg.beam)
            if not nbest:
                return [Hypothesis(truncated=True)]
            return rank_nbest(decoder, nbest, h_seg_pe, cfg.alpha)
        alpha = cfg.alpha if cfg.mode == 'cat' else 0.0
        ranked = _beam_search(
            decoder,
            h_seg_pe,
            lattice,
            alpha,
            cfg.beam,
            cfg.token_cap(memory.shape[-2]),
            cfg.length_penalty,
        )
    return ranked or [Hypothesis(truncated=True)]


@dataclass
class SegmentResult:
    """The second-pass result of one segment."""

    index: int
    segment: Segment
    hypotheses: list[Hypothesis] = field(default_factory=list)
    error: str | None = None

    @property
    def best(self) -> Hypothesis | None:
        """The best hypothesis, if decoding succeeded."""
        return self.hypotheses[0] if self.hypotheses else None


@dataclass
class Transcript:
    """The decoded transcript of one stream with its segment boundaries."""

    stream_id: str
    segments: list[SegmentResult]
    first_pass: list[int]
    dropped: int = 0

    @property
    def tokens(self) -> list[int]:
        """The concatenated best hypotheses (segmentation tokens kept)."""
        tokens: list[int] = []
        for result in self.segments:
            if result.best is not None:
                tokens.extend(result.best.tokens)
        return tokens

    @property
    def failures(self) -> int:
        """The number of segments that failed to decode."""
        return sum(result.error is not None for result in self.segments)

    @property
    def truncations(self) -> int:
        """The number of segments stopped by the token cap."""
        return sum(result.best is not None and result.best.truncated for result in self.segments)


def _segmentation(
    stream: AcousticStream,
    first_pass: list[int],
    frames: list[int],
    n_frames: int,
    decimation: int,
    cfg: DecodeConfig,
) -> tuple[list[Segment], int]:
    if cfg.segmentation == 'oracle':
        if stream.segments is None:
            raise ContractError(f'Stream {stream.id!r} has no reference segments')
        segments = [seg for seg in stream.segments if seg.t_b < n_frames]
        return [Segment(s.t_b, min(s.t_e, n_frames - 1), s.transcript, s.open) for s in segments], 0
    if cfg.segmentation == 'vad':
        segments = simulated_vad(
            stream,
            decimation,
            threshold=cfg.vad_threshold,
            jitter=cfg.vad_jitter,
            seed=cfg.vad_seed,
            min_gap=cfg.vad_min_gap,
        )
        return [Segment(s.t_b, min(s.t_e, n_frames - 1)) for s in segments if s.t_b < n_frames], 0
    split = extract_segments(first_pass, frames, n_frames, SEG_END)
    # an open tail without first-pass content holds nothing to decode
    return [seg for seg in split.segments if not (seg.open and not seg.transcript)], split.dropped


def two_pass_decode(stream: AcousticStream, model: JointModel, cfg: DecodeConfig) -> Transcript:
    """Decode a long-form stream with one encoder pass, CTC segmentation and per-segment decoding.

    With ``cfg.encodings == 'lfe'`` every segment memory is a slice of the full-stream encodings,
    so the encoder runs exactly once. A segment that fails is logged and skipped.

    Examples:
        >>> cfg = DecodeConfig(mode='cat', segmentation='semantic')
        >>> transcript = two_pass_decode(stream, model, cfg)
        >>> [result.segment for result in transcript.segments]
    """
    decimation = model.config.encoder.R
    with no_grad():
        encodings = model.encoder.encode(stream, chunk_size=cfg.chunk_size)
        lattice = model.ctc_head.lattice(encodings.encodings)
    path = ctc_greedy(lattice)
    segments, dropped = _segmentation(
        stream,
        path.tokens,
        path.frames,
        len(encodings),
        decimation,
        cfg,
    )
    LOGGER.debug(
        'Stream %r: %d first-pass tokens, %d segments.',
        stream.id,
        len(path.tokens),
        len(segments),
    )

    def work(item: tuple[int, Segment]) -> SegmentResult:
        index, segment = item
        result = SegmentResult(index, segment)
        try:
            with no_grad():
                if cfg.encodings == 'lfe':
                    memory, seg_lattice = encodings.slice(segment), lattice.slice(segment)
                else:
                    start, stop = segment.acoustic_span(decimation)
                    window = stream.window(start, stop)
                    memory = model.encoder.encode(window, chunk_size=cfg.chunk_size).encodings
                    seg_lattice = model.ctc_head.lattice(memory)
                ranked = decode_segment(model.decoder, memory, seg_lattice, cfg)
                result.hypotheses = ranked[: cfg.nbest]
        except LfadError as ex:
            LOGGER.warning(
                'Segment %d [%d, %d] of %r failed: %s',
                index,
                segment.t_b,
                segment.t_e,
                stream.id,
                ex,
            )
            result.error = str(ex)
        return result

    items = list(enumerate(segments))
    if cfg.workers > 1 and len(items) > 1:
        with ThreadPoolExecutor(
            max_workers=cfg.workers,
            thread_name_prefix='lfad-decode',
        ) as executor:
            results = list(executor.map(work, items))
    else:
        results = [work(item) for item in items]
    results.sort(key=lambda result: result.index)
    return Transcript(stream.id, results, path.tokens, dropped)
