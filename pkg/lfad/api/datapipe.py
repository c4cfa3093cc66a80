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
"""Synthetic long-form corpus, the data-level training transforms, a simulated VAD and batching.

A recording is a sequence of sentences separated by near-silent gaps. Every token of a sentence
is rendered as a few frames of its prototype vector plus Gaussian noise. Ground-truth segments
are expressed in encoding frames (acoustic frames divided by the decimation factor ``R``).
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from typing import Any, Iterable, Iterator, Sequence

import numpy as np

from lfad.api.errors import ConfigError, ContractError, EmptyInputError
from lfad.api.masking import MaskSpec
from lfad.api.stream import AcousticStream, Segment
from lfad.api.vocab import EOS, RESERVED, SEG_END


__all__ = [
    'AC_FILLS',
    'SyntheticCorpusSpec',
    'TrainingExample',
    'Batch',
    'generate_corpus',
    'save_corpus',
    'load_corpus',
    'save_examples',
    'transform_sc',
    'segment_example',
    'transform_ac',
    'tag_semantic',
    'split_semantic',
    'simulated_vad',
    'frame_energy',
    'make_batches',
]


LOGGER = logging.getLogger(__name__)

AC_FILLS = ('audio', 'silence')


def _check_range(name: str, bounds: tuple[int, int], minimum: int = 1) -> tuple[int, int]:
    low, high = (int(value) for value in bounds)
    if low < minimum or high < low:
        raise ConfigError(
            f'corpus.{name} must be a range [low, high] with low >= {minimum}, got {bounds}',
        )
    return low, high


@dataclass(frozen=True)
class SyntheticCorpusSpec:  # pylint: disable=too-many-instance-attributes
    """Distributions of the synthetic corpus.

    Durations are counted in encoding frames; every range is inclusive and sampled uniformly.
    """

    vocab_size: int = 16
    feature_dim: int = 8
    token_frames: tuple[int, int] = (2, 4)
    gap_frames: tuple[int, int] = (3, 6)
    sentences: tuple[int, int] = (2, 4)
    words: tuple[int, int] = (2, 5)
    noise: float = 0.1
    silence_level: float = 0.05
    seed: int = 0

    def __post_init__(self) -> None:
        """Validate the distributions."""
        if self.vocab_size <= len(RESERVED):
            raise ConfigError(f'corpus.vocab_size must exceed the {len(RESERVED)} reserved ids')
        if self.feature_dim < 1:
            raise ConfigError(f'corpus.feature_dim must be positive, got {self.feature_dim}')
        if self.noise < 0.0 or self.silence_level < 0.0:
            raise ConfigError('corpus.noise and corpus.silence_level must be non-negative')
        for name in ('token_frames', 'gap_frames', 'sentences', 'words'):
            object.__setattr__(self, name, _check_range(name, getattr(self, name)))

    @property
    def content_ids(self) -> range:
        """The ids of the content tokens."""
        return range(len(RESERVED), self.vocab_size)

    def prototypes(self) -> np.ndarray:
        """Return the prototype vectors ``(V, F)``.

        Rows of reserved ids are zero, the others have norm ``sqrt(F)``.
        """
        rng = np.random.default_rng(np.random.SeedSequence(self.seed).spawn(1)[0])
        table = np.zeros((self.vocab_size, self.feature_dim))
        raw = rng.normal(size=(len(self.content_ids), self.feature_dim))
        raw *= np.sqrt(self.feature_dim) / np.linalg.norm(raw, axis=1, keepdims=True)
        table[len(RESERVED) :] = raw
        return table


def _sample_sentence(spec: SyntheticCorpusSpec, rng: np.random.Generator) -> list[int]:
    n_words = int(rng.integers(spec.words[0], spec.words[1] + 1))
    sentence: list[int] = []
    for _ in range(n_words):
        choices = [token for token in spec.content_ids if not sentence or token != sentence[-1]]
        sentence.append(int(rng.choice(choices)))
    return sentence


def _append_silence(
    blocks: list[np.ndarray],
    spec: SyntheticCorpusSpec,
    rng: np.random.Generator,
    decimation: int,
    position: int,
) -> int:
    n_frames = int(rng.integers(spec.gap_frames[0], spec.gap_frames[1] + 1))
    shape = (n_frames * decimation, spec.feature_dim)
    blocks.append(rng.normal(0.0, spec.silence_level, size=shape))
    return position + n_frames


def generate_corpus(
    spec: SyntheticCorpusSpec,
    n_recordings: int,
    decimation: int,
) -> list[AcousticStream]:
    """Generate ``n_recordings`` recordings with their ground-truth segments.

    Every recording starts and ends with a silence gap and separates its sentences with one.

    Raises:
        ConfigError:
            If ``n_recordings < 1`` or ``decimation < 1``.

    Examples:
        >>> corpus = generate_corpus(SyntheticCorpusSpec(seed=3), n_recordings=2, decimation=2)
        >>> len(corpus), corpus[0].segments[0].t_b >= 3
        (2, True)
    """
    if n_recordings < 1:
        raise ConfigError(f'Need at least one recording, got {n_recordings}')
    if decimation < 1:
        raise ConfigError(f'Decimation factor must be positive, got {decimation}')

    prototypes = spec.prototypes()
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed).spawn(2)[1])
    corpus = []
    for index in range(n_recordings):
        blocks: list[np.ndarray] = []
        segments: list[Segment] = []
        position = _append_silence(blocks, spec, rng, decimation, 0)
        for _ in range(int(rng.integers(spec.sentences[0], spec.sentences[1] + 1))):
            sentence = _sample_sentence(spec, rng)
            start = position
            for token in sentence:
                n_frames = int(rng.integers(spec.token_frames[0], spec.token_frames[1] + 1))
                frames = np.repeat(prototypes[token][None], n_frames * decimation, axis=0)
                if spec.noise > 0:
                    frames = frames + rng.normal(0.0, spec.noise, size=frames.shape)
                blocks.append(frames)
                position += n_frames
            segments.append(Segment(start, position - 1, tuple(sentence)))
            position = _append_silence(blocks, spec, rng, decimation, position)
        corpus.append(
            AcousticStream(
                np.concatenate(blocks, axis=0),
                segments,
                id=f'rec{index:05d}',
                metadata={'decimation': decimation, 'seed': spec.seed},
            ),
        )
    LOGGER.debug('Generated %d recordings (seed %d).', n_recordings, spec.seed)
    return corpus


def save_corpus(streams: Iterable[AcousticStream], path: str | os.PathLike) -> int:
    """Write one recording per JSON line; returns the number of recordings written."""
    count = 0
    with open(path, mode='w', encoding='utf-8') as file:
        for stream in streams:
            file.write(json.dumps(stream.to_dict()) + '\n')
            count += 1
    return count


def load_corpus(path: str | os.PathLike) -> list[AcousticStream]:
    """Read a JSON-lines corpus.

    Raises:
        EmptyInputError:
            If the file holds no recording.
    """
    with open(path, encoding='utf-8') as file:
        streams = [AcousticStream.from_dict(json.loads(line)) for line in file if line.strip()]
    if not streams:
        raise EmptyInputError(f'Corpus {os.fspath(path)!r} holds no recording')
    return streams


# Training examples ################################################################################


@dataclass
class TrainingExample:  # pylint: disable=too-many-instance-attributes
    """Acoustic features of one training example and its targets.

    Attributes:
        features (np.ndarray):
            The acoustic frames ``(T', F)``, possibly expanded with neighbouring context.
        valid (tuple[int, int]):
            The half-open acoustic-frame window of the original span inside ``features``.
        targets (tuple[int, ...]):
            The tagged transcript, ending with EOS.
        segments (list[Segment]):
            The sentences, in encoding frames relative to the first frame of ``features``.
        offset (int):
            The absolute encoding-frame index of the first frame of ``features`` in its recording.
    """

    features: np.ndarray
    valid: tuple[int, int]
    targets: tuple[int, ...]
    segments: list[Segment]
    offset: int = 0
    source: str = ''
    sc_applied: bool = False
    sc_clamped: bool = False
    ac_applied: bool = False
    ac_clipped: bool = False

    def __post_init__(self) -> None:
        """Validate the window and the targets."""
        start, stop = self.valid
        if not 0 <= start < stop <= self.features.shape[0]:
            raise ContractError(f'Valid window {self.valid} outside [0, {self.features.shape[0]})')
        if not self.targets or self.targets[-1] != EOS:
            raise ContractError('Training targets must end with EOS')

    def valid_frames(self, decimation: int) -> tuple[int, int]:
        """Return the valid window in encoding frames."""
        start, stop = self.valid
        return start // decimation, stop // decimation

    def ctc_targets(self) -> list[int]:
        """Return the CTC targets: the tagged transcript without EOS."""
        return list(self.targets[:-1])

    def aed_targets(self, ss_in_aed: bool = True) -> list[int]:
        """Return the AED targets, optionally without segmentation tokens."""
        if ss_in_aed:
            return list(self.targets)
        return [token for token in self.targets if token != SEG_END]

    def to_dict(self) -> dict[str, Any]:
        """Return the JSON-lines representation (the corpus format plus the training fields)."""
        return {
            'id': self.source,
            'features': self.features.tolist(),
            'segments': [segment.to_dict() for segment in self.segments],
            'valid': list(self.valid),
            'targets': list(self.targets),
            'offset': self.offset,
            'flags': {
                'sc_applied': self.sc_applied,
                'sc_clamped': self.sc_clamped,
                'ac_applied': self.ac_applied,
                'ac_clipped': self.ac_clipped,
            },
        }


def save_examples(examples: Iterable[TrainingExample], path: str | os.PathLike) -> int:
    """Write one training example per JSON line; returns the number written."""
    count = 0
    with open(path, mode='w', encoding='utf-8') as file:
        for example in examples:
            file.write(json.dumps(example.to_dict()) + '\n')
            count += 1
    return count


def tag_semantic(sentences: Sequence[Sequence[int]], ss: bool = True) -> list[int]:
    """Concatenate sentence transcripts, closing each with the segmentation token when ``ss``.

    Examples:
        >>> tag_semantic([[4, 5], [6, 7]])
        [4, 5, 3, 6, 7, 3, 2]
        >>> tag_semantic([[4, 5], [6, 7]], ss=False)
        [4, 5, 6, 7, 2]
    """
    targets: list[int] = []
    for sentence in sentences:
        targets.extend(int(token) for token in sentence)
        if ss:
            targets.append(SEG_END)
    targets.append(EOS)
    return targets


def split_semantic(targets: Sequence[int]) -> list[list[int]]:
    """Split tagged targets back into sentences (the inverse of :func:`tag_semantic`)."""
    sentences: list[list[int]] = []
    current: list[int] = []
    for token in targets:
        if token == EOS:
            break
        if token == SEG_END:
            sentences.append(current)
            current = []
        else:
            current.append(int(token))
    if current:
        sentences.append(current)
    return sentences


def _example_from_run(
    recording: AcousticStream,
    run: Sequence[Segment],
    decimation: int,
    ss: bool,
    sc_clamped: bool = False,
) -> TrainingExample:
    first, last = run[0], run[-1]
    start, stop = first.t_b * decimation, (last.t_e + 1) * decimation
    return TrainingExample(
        features=recording.features[start:stop],
        valid=(0, stop - start),
        targets=tuple(tag_semantic([segment.transcript or () for segment in run], ss)),
        segments=[segment.shifted(-first.t_b) for segment in run],
        offset=first.t_b,
        source=recording.id,
        sc_applied=len(run) > 1,
        sc_clamped=sc_clamped,
    )


def segment_example(
    recording: AcousticStream,
    index: int,
    decimation: int,
    ss: bool = True,
) -> TrainingExample:
    """Return the training example of the single ground-truth segment ``index``."""
    if not recording.segments:
        raise ContractError(f'Recording {recording.id!r} has no segments')
    return _example_from_run(recording, recording.segments[index : index + 1], decimation, ss)


# pylint: disable-next=too-many-arguments
def transform_sc(
    recording: AcousticStream,
    max_duration: int,
    rng: np.random.Generator,
    decimation: int,
    ss: bool = True,
    max_segments: int | None = None,
) -> TrainingExample:
    """Concatenate a random run of consecutive segments, including the audio between them.

    The run starts at a uniformly drawn segment; its length is drawn uniformly among the runs
    whose encoding-frame span fits in ``max_duration``. If even the first segment is longer, the
    example holds that single segment and is flagged ``sc_clamped``.

    Raises:
        ContractError:
            If the recording has no segments.
    """
    segments = recording.segments or []
    if not segments:
        raise ContractError(f'Recording {recording.id!r} has no segments')
    first = int(rng.integers(len(segments)))
    limit = len(segments) - first
    if max_segments is not None:
        limit = min(max_segments, limit)
    start = segments[first].t_b
    feasible = 0
    while feasible < limit and segments[first + feasible].t_e - start + 1 <= max_duration:
        feasible += 1
    if feasible == 0:
        single = segments[first : first + 1]
        return _example_from_run(recording, single, decimation, ss, sc_clamped=True)
    length = int(rng.integers(1, feasible + 1))
    return _example_from_run(recording, segments[first : first + length], decimation, ss)


# pylint: disable-next=too-many-arguments,too-many-locals
def transform_ac(
    example: TrainingExample,
    recording: AcousticStream,
    spec: MaskSpec,
    p_apply: float,
    rng: np.random.Generator,
    fill: str = 'audio',
    silence_level: float = 0.05,
) -> TrainingExample:
    """Expand an example with the left and right acoustic context its encodings need.

    With probability ``p_apply`` the example is extended by up to ``C_L_max`` acoustic frames
    before and ``C_R_max`` after it. ``fill='audio'`` takes the true neighbouring frames of the
    recording, clipped at its edges (``ac_clipped``); ``fill='silence'`` pads with noise at the
    silence level instead. The valid window keeps marking the original span.

    Raises:
        ConfigError:
            If ``fill`` is unknown.
    """
    if fill not in AC_FILLS:
        raise ConfigError(f'Unknown AC fill {fill!r}, expected one of {AC_FILLS}')
    if rng.random() >= p_apply:
        return example

    R = spec.R  # noqa: N806
    start = example.offset * R
    stop = start + example.features.shape[0]
    if fill == 'audio':
        left = min(spec.c_l_max, start)
        right = min(spec.c_r_max, recording.n_frames - stop)
        right -= right % R
        features = recording.features[start - left : stop + right]
        clipped = left < spec.c_l_max or right < spec.c_r_max
    else:
        left, right = spec.c_l_max, spec.c_r_max
        dims = example.features.shape[1]
        features = np.concatenate(
            [
                rng.normal(0.0, silence_level, size=(left, dims)),
                example.features,
                rng.normal(0.0, silence_level, size=(right, dims)),
            ],
        )
        clipped = False
    shift = left // R
    return TrainingExample(
        features=features,
        valid=(example.valid[0] + left, example.valid[1] + left),
        targets=example.targets,
        segments=[segment.shifted(shift) for segment in example.segments],
        offset=example.offset - shift,
        source=example.source,
        sc_applied=example.sc_applied,
        sc_clamped=example.sc_clamped,
        ac_applied=True,
        ac_clipped=clipped,
    )


# Simulated VAD ####################################################################################


def frame_energy(stream: AcousticStream, decimation: int) -> np.ndarray:
    """Return the mean feature norm of every encoding frame, scaled by ``1 / sqrt(F)``."""
    T = stream.n_frames // decimation  # noqa: N806
    norms = np.linalg.norm(stream.features[: T * decimation], axis=1) / np.sqrt(stream.feature_dim)
    return norms.reshape(T, decimation).mean(axis=1)


# pylint: disable-next=too-many-arguments
def simulated_vad(
    stream: AcousticStream,
    decimation: int,
    threshold: float = 0.5,
    jitter: int = 2,
    seed: int = 0,
    min_gap: int = 2,
) -> list[Segment]:
    """Energy-threshold segmentation with random boundary jitter of up to ``jitter`` frames.

    Speech runs separated by fewer than ``min_gap`` silent encoding frames are merged. A stream
    without any frame above the threshold is a single segment.
    """
    energy = frame_energy(stream, decimation)
    T = energy.size  # noqa: N806
    if T == 0:
        return []
    speech = energy > threshold
    runs: list[list[int]] = []
    for t in np.flatnonzero(speech).tolist():
        if runs and t - runs[-1][1] - 1 < min_gap:
            runs[-1][1] = t
        else:
            runs.append([t, t])
    if not runs:
        return [Segment(0, T - 1)]

    rng = np.random.default_rng(seed)
    segments: list[Segment] = []
    floor = 0
    for t_b, t_e in runs:
        if jitter > 0:
            t_b += int(rng.integers(-jitter, jitter + 1))
            t_e += int(rng.integers(-jitter, jitter + 1))
        t_b = min(max(t_b, floor), T - 1)
        t_e = min(max(t_e, t_b), T - 1)
        segments.append(Segment(t_b, t_e))
        floor = t_e + 1
        if floor >= T:
            break
    return segments


# Batching #########################################################################################


@dataclass
class Batch:  # pylint: disable=too-many-instance-attributes
    """A zero-padded batch of training examples sharing one chunk size."""

    features: np.ndarray
    frame_counts: np.ndarray
    offsets: np.ndarray
    valid: np.ndarray
    targets: list[tuple[int, ...]]
    chunk_size: int
    examples: list[TrainingExample] = field(repr=False, default_factory=list)

    def __len__(self) -> int:
        """Return the batch size."""
        return self.features.shape[0]

    def digest(self) -> str:
        """Return a short hash of the batch content."""
        sha = hashlib.sha256(np.ascontiguousarray(self.features).tobytes())
        sha.update(repr((self.targets, self.offsets.tolist(), self.chunk_size)).encode('utf-8'))
        return sha.hexdigest()[:16]


def make_batches(
    examples: Sequence[TrainingExample],
    batch_size: int,
    chunk_sizes: Sequence[int],
    rng: np.random.Generator,
    decimation: int,
) -> Iterator[Batch]:
    """Shuffle the examples and yield padded batches with chunk sizes drawn from ``chunk_sizes``.

    Raises:
        ConfigError:
            If ``batch_size < 1`` or ``chunk_sizes`` is empty.
    """
    if batch_size < 1:
        raise ConfigError(f'Batch size must be positive, got {batch_size}')
    if not chunk_sizes:
        raise ConfigError('Need at least one chunk size')
    order = rng.permutation(len(examples))
    for begin in range(0, len(order), batch_size):
        members = [examples[index] for index in order[begin : begin + batch_size]]
        chunk_size = int(chunk_sizes[int(rng.integers(len(chunk_sizes)))])
        longest = max(example.features.shape[0] for example in members)
        dims = members[0].features.shape[1]
        features = np.zeros((len(members), longest, dims))
        for row, example in enumerate(members):
            features[row, : example.features.shape[0]] = example.features
        yield Batch(
            features=features,
            frame_counts=np.array([example.features.shape[0] // decimation for example in members]),
            offsets=np.array([example.offset for example in members]),
            valid=np.array([example.valid_frames(decimation) for example in members]),
            targets=[example.targets for example in members],
            chunk_size=chunk_size,
            examples=members,
        )
