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
"""Acoustic streams and the segments annotated on them."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from lfad.api.errors import ContractError, DimensionError, EmptyInputError


__all__ = ['Segment', 'AcousticStream']


@dataclass(frozen=True)
class Segment:
    """An inclusive span ``[t_b, t_e]`` of encoding frames with its transcript.

    ``transcript`` is :data:`None` when the words are unknown (for example a VAD segment). An
    ``open`` segment runs to the end of the stream and was not closed by a segmentation token.

    Raises:
        ContractError:
            If ``t_b > t_e``, ``t_b < 0``, or a closed segment carries an empty transcript.
    """

    t_b: int
    t_e: int
    transcript: tuple[int, ...] | None = None
    open: bool = False

    def __post_init__(self) -> None:
        """Validate the span."""
        if self.t_b < 0 or self.t_e < self.t_b:
            raise ContractError(f'Empty or negative segment span [{self.t_b}, {self.t_e}]')
        if self.transcript is not None:
            object.__setattr__(self, 'transcript', tuple(int(token) for token in self.transcript))
            if len(self.transcript) == 0 and not self.open:  # type: ignore[arg-type]
                raise ContractError(
                    f'Closed segment [{self.t_b}, {self.t_e}] has an empty transcript',
                )

    def __len__(self) -> int:
        """Return the number of encoding frames in the segment."""
        return self.t_e - self.t_b + 1

    def frames(self) -> range:
        """Return the encoding-frame indices of the segment."""
        return range(self.t_b, self.t_e + 1)

    def acoustic_span(self, decimation: int) -> tuple[int, int]:
        """Return the half-open acoustic-frame interval covered by the segment."""
        return self.t_b * decimation, (self.t_e + 1) * decimation

    def shifted(self, offset: int) -> Segment:
        """Return the segment moved by ``offset`` encoding frames."""
        return Segment(self.t_b + offset, self.t_e + offset, self.transcript, self.open)

    def to_dict(self) -> dict[str, Any]:
        """Return the JSON-lines representation ``{t_b, t_e, tokens}``."""
        record: dict[str, Any] = {'t_b': self.t_b, 't_e': self.t_e}
        record['tokens'] = None if self.transcript is None else list(self.transcript)
        if self.open:
            record['open'] = True
        return record

    @classmethod
    def from_dict(cls, record: dict[str, Any]) -> Segment:
        """Parse the JSON-lines representation."""
        tokens = record.get('tokens')
        return cls(
            int(record['t_b']),
            int(record['t_e']),
            None if tokens is None else tuple(tokens),
            bool(record.get('open', False)),
        )


@dataclass
class AcousticStream:
    """A sequence of acoustic feature frames ``(T', F)`` with optional ground-truth segments.

    Segments are expressed in encoding frames (acoustic frames divided by the decimation factor).
    """

    features: np.ndarray
    segments: list[Segment] | None = None
    id: str = ''
    metadata: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        """Validate the feature matrix."""
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise DimensionError('features must be a (frames, dims) matrix', self.features.shape)
        if self.features.shape[0] < 1:
            raise EmptyInputError('An acoustic stream needs at least one frame')

    @property
    def n_frames(self) -> int:
        """The number of acoustic frames ``T'``."""
        return self.features.shape[0]

    @property
    def feature_dim(self) -> int:
        """The feature dimension ``F``."""
        return self.features.shape[1]

    def transcript(self) -> list[int]:
        """Return the concatenated ground-truth transcript of all segments."""
        tokens: list[int] = []
        for segment in self.segments or ():
            tokens.extend(segment.transcript or ())
        return tokens

    def window(self, start: int, stop: int) -> np.ndarray:
        """Return the acoustic frames ``[start, stop)`` clipped to the stream."""
        return self.features[max(start, 0) : min(stop, self.n_frames)]

    def to_dict(self) -> dict[str, Any]:
        """Return the JSON-lines representation ``{id, features, segments}``."""
        return {
            'id': self.id,
            'features': self.features.tolist(),
            'segments': [segment.to_dict() for segment in self.segments or ()],
        }

    @classmethod
    def from_dict(cls, record: dict[str, Any]) -> AcousticStream:
        """Parse the JSON-lines representation."""
        segments: Sequence[dict[str, Any]] = record.get('segments', ())
        return cls(
            features=np.asarray(record['features'], dtype=np.float64),
            segments=[Segment.from_dict(segment) for segment in segments],
            id=str(record.get('id', '')),
        )
