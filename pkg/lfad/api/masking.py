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
"""Chunked causal self-attention masks and the effective context they give each encoding frame.

The encoder sees, at every layer, a causal chunk of ``M`` encoding frames plus ``N`` look-back
frames. Stacking ``L`` such layers over a frontend that decimates time by ``R`` gives the maximal
left and right contexts ``C_L_max = L * N * R`` and ``C_R_max = M * R`` acoustic frames. An
encoding is *long-form* (LFE) when both contexts are saturated, and a segment is long-form when all
of its encodings are.

:func:`context_profile` does not use the closed form: it composes the per-layer dependency
matrices and reads the context off the reachable sets, so the closed form can be tested against it.
"""

from __future__ import annotations

import dataclasses
from typing import NamedTuple

import numpy as np
from cachetools.func import lru_cache

from lfad.api.errors import ConfigError, ContractError, EmptyInputError, FrameIndexError
from lfad.api.stream import Segment


__all__ = [
    'LOOKBACK_ANCHORS',
    'MaskSpec',
    'ContextProfile',
    'AcousticWindow',
    'chunk_bounds',
    'build_layer_mask',
    'mixing_mask',
    'layer_dependency',
    'context_profile',
    'is_lfe',
    'is_long_form_segment',
    'required_window',
]


LOOKBACK_ANCHORS = ('frame', 'chunk')


@dataclasses.dataclass(frozen=True)
class MaskSpec:
    """The context geometry of the encoder.

    Attributes:
        L (int): Number of self-attention layers.
        N (int): Look-back frames per layer, in encoding frames.
        M (int): Chunk size, in encoding frames.
        R (int): Decimation factor (acoustic frames per encoding frame).
        lookback (str):
            Where the look-back window is anchored: ``'frame'`` (``[q - N, chunk_end(q)]``) or
            ``'chunk'`` (``[chunk_start(q) - N, chunk_end(q)]``).

    Raises:
        ConfigError:
            If any of the values is out of range.

    Examples:
        >>> spec = MaskSpec(L=12, N=16, M=16, R=6)
        >>> spec.c_l_max, spec.c_r_max
        (1152, 96)
    """

    L: int  # noqa: N815
    N: int  # noqa: N815
    M: int  # noqa: N815
    R: int  # noqa: N815
    lookback: str = 'frame'

    def __post_init__(self) -> None:
        """Validate the geometry."""
        if self.L < 1 or self.N < 0 or self.M < 1 or self.R < 1:
            raise ConfigError(
                f'Invalid mask geometry L={self.L}, N={self.N}, M={self.M}, R={self.R} '
                '(need L >= 1, N >= 0, M >= 1, R >= 1)',
            )
        if self.lookback not in LOOKBACK_ANCHORS:
            raise ConfigError(
                f'Unknown look-back anchor {self.lookback!r}, expected one of {LOOKBACK_ANCHORS}',
            )

    @property
    def c_l_max(self) -> int:
        """Maximal left context ``L * N * R`` in acoustic frames."""
        return self.L * self.N * self.R

    @property
    def c_r_max(self) -> int:
        """Maximal right context ``M * R`` in acoustic frames."""
        return self.M * self.R

    def with_chunk_size(self, chunk_size: int) -> MaskSpec:
        """Return a copy with another chunk size (variable chunk training and decoding)."""
        return dataclasses.replace(self, M=int(chunk_size))

    @classmethod
    def parse(cls, text: str, lookback: str = 'frame') -> MaskSpec:
        """Parse ``'L,N,M,R'``.

        Raises:
            ConfigError:
                If the text does not hold four integers.
        """
        try:
            L, N, M, R = (int(value) for value in text.split(','))  # noqa: N806
        except ValueError as ex:
            raise ConfigError(f'Expected "L,N,M,R", got {text!r}') from ex
        return cls(L, N, M, R, lookback=lookback)


class ContextProfile(NamedTuple):
    """Per-encoding-frame available contexts in acoustic frames."""

    spec: MaskSpec
    c_left: np.ndarray
    c_right: np.ndarray
    offset: int = 0

    @property
    def n_frames(self) -> int:
        """The number of encoding frames ``T``."""
        return int(self.c_left.shape[0])

    def lfe_mask(self) -> np.ndarray:
        """Return the boolean LFE flag of every frame."""
        return (self.c_left >= self.spec.c_l_max) & (self.c_right >= self.spec.c_r_max)


class AcousticWindow(NamedTuple):
    """A half-open acoustic-frame interval demanded around a segment.

    ``start`` and ``stop`` are the unclipped demand; ``clipped`` tells whether the stream edges cut
    it, and :meth:`bounds` returns the clipped interval.
    """

    start: int
    stop: int
    clipped: bool
    n_frames: int | None = None

    def bounds(self) -> tuple[int, int]:
        """Return the interval clipped to ``[0, n_frames)``."""
        stop = self.stop if self.n_frames is None else min(self.stop, self.n_frames)
        return max(self.start, 0), stop


def chunk_bounds(
    spec: MaskSpec,
    T: int,  # noqa: N803
    offset: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Return the local chunk start and (clipped) chunk end of every frame.

    ``offset`` is the absolute index of the first frame; chunks are laid on the absolute grid.
    """
    absolute = np.arange(T) + offset
    starts = (absolute // spec.M) * spec.M - offset
    ends = np.minimum(starts + spec.M - 1, T - 1)
    return starts, ends


@lru_cache(maxsize=256)
def _layer_mask(spec: MaskSpec, T: int, offset: int) -> np.ndarray:  # noqa: N803
    starts, ends = chunk_bounds(spec, T, offset)
    queries = np.arange(T)
    anchors = queries if spec.lookback == 'frame' else starts
    keys = np.arange(T)[None, :]
    mask = (keys >= (anchors - spec.N)[:, None]) & (keys <= ends[:, None])
    mask.setflags(write=False)
    return mask


def build_layer_mask(
    spec: MaskSpec,
    T: int,  # noqa: N803
    layer: int = 0,
    offset: int = 0,
) -> np.ndarray:
    """Build the boolean self-attention mask ``[T, T]`` of one encoder layer.

    Entry ``(q, k)`` is attendable iff ``k`` lies in the look-back window of ``q`` and not beyond
    the end of the chunk of ``q``. The structure is identical across layers.

    Args:
        spec (MaskSpec): The context geometry.
        T (int): Number of encoding frames.
        layer (int): Layer index, ``0 <= layer < L``.
        offset (int): Absolute index of the first frame (chunk grid phase).

    Raises:
        EmptyInputError:
            If ``T == 0``.
        ContractError:
            If ``layer`` is out of range.

    Examples:
        >>> build_layer_mask(MaskSpec(L=1, N=1, M=1, R=1), 3).astype(int)
        array([[1, 0, 0],
               [1, 1, 0],
               [0, 1, 1]])
    """
    if T < 1:
        raise EmptyInputError('Cannot build an attention mask for an empty stream (T = 0)')
    if not 0 <= layer < spec.L:
        raise ContractError(f'Layer index {layer} out of range [0, {spec.L})')
    return _layer_mask(spec, int(T), int(offset))


def mixing_mask(spec: MaskSpec, T: int, offset: int = 0) -> np.ndarray:  # noqa: N803
    """Return whether each frame's successor lies in the same chunk (local mixing reach)."""
    starts, _ = chunk_bounds(spec, T, offset)
    same = np.zeros(T, dtype=bool)
    same[:-1] = starts[1:] == starts[:-1]
    return same


def layer_dependency(spec: MaskSpec, T: int, offset: int = 0) -> np.ndarray:  # noqa: N803
    """Return the input frames each output frame of one encoder block depends on.

    Combines the attention mask with the local mixing step, where frame ``t`` also reads the
    attention output of frame ``t + 1`` when both lie in the same chunk.
    """
    attention = build_layer_mask(spec, T, 0, offset)
    dependency = attention.copy()
    successor = mixing_mask(spec, T, offset)
    dependency[:-1] |= attention[1:] & successor[:-1, None]
    return dependency


@lru_cache(maxsize=256)
def _context_profile(spec: MaskSpec, T: int, offset: int) -> ContextProfile:  # noqa: N803
    dependency = layer_dependency(spec, T, offset).astype(np.float64)
    reach = np.eye(T)
    for _ in range(spec.L):
        reach = ((reach @ dependency) > 0.0).astype(np.float64)
    leftmost = reach.argmax(axis=1)
    rightmost = T - 1 - reach[:, ::-1].argmax(axis=1)
    starts, _ = chunk_bounds(spec, T, offset)
    anchors = np.arange(T) if spec.lookback == 'frame' else starts
    c_left = (anchors - leftmost) * spec.R
    c_right = (rightmost + 1 - starts) * spec.R
    c_left.setflags(write=False)
    c_right.setflags(write=False)
    return ContextProfile(spec, c_left, c_right, offset)


def context_profile(spec: MaskSpec, T: int, offset: int = 0) -> ContextProfile:  # noqa: N803
    """Compute the available left/right context of every encoding frame by iterated reachability.

    ``C_L(t)`` counts the acoustic frames between the leftmost input reachable from frame ``t``
    through all ``L`` blocks and the look-back anchor of ``t``; ``C_R(t)`` counts the acoustic
    frames from the start of the chunk of ``t`` up to the rightmost reachable input, inclusive.

    Raises:
        EmptyInputError:
            If ``T == 0``.

    Examples:
        >>> profile = context_profile(MaskSpec(L=2, N=2, M=2, R=1), 16)
        >>> int(profile.c_left.max()), int(profile.c_right.max())
        (4, 2)
    """
    if T < 1:
        raise EmptyInputError('Cannot compute the context profile of an empty stream (T = 0)')
    return _context_profile(spec, int(T), int(offset))


def is_lfe(profile: ContextProfile, t: int) -> bool:
    """Return whether frame ``t`` has saturated left and right context (a long-form encoding).

    Raises:
        FrameIndexError:
            If ``t`` is outside the stream.
    """
    if not 0 <= t < profile.n_frames:
        raise FrameIndexError(f'Frame {t} out of range [0, {profile.n_frames})')
    spec = profile.spec
    return bool(profile.c_left[t] >= spec.c_l_max and profile.c_right[t] >= spec.c_r_max)


def is_long_form_segment(profile: ContextProfile, segment: Segment) -> bool:
    """Return whether every encoding of ``segment`` is a long-form encoding.

    Raises:
        ContractError:
            If the segment is empty or leaves the stream.
    """
    if len(segment) < 1:
        raise ContractError('Empty segment')
    if segment.t_e >= profile.n_frames:
        raise ContractError(
            f'Segment [{segment.t_b}, {segment.t_e}] '
            f'leaves the stream of {profile.n_frames} frames',
        )
    return all(is_lfe(profile, t) for t in segment.frames())


def required_window(
    spec: MaskSpec,
    segment: Segment,
    n_frames: int | None = None,
) -> AcousticWindow:
    """Return the minimal acoustic window that makes ``segment`` long-form.

    The demand is ``[t_b * R - C_L_max, (t_e + 1) * R + C_R_max)``. When ``n_frames`` (the acoustic
    length of the stream) is given, ``clipped`` also reports a cut at the right edge.

    Examples:
        >>> required_window(MaskSpec(L=12, N=16, M=16, R=6), Segment(500, 520))
        AcousticWindow(start=1848, stop=3222, clipped=False, n_frames=None)
    """
    start = segment.t_b * spec.R - spec.c_l_max
    stop = (segment.t_e + 1) * spec.R + spec.c_r_max
    clipped = start < 0 or (n_frames is not None and stop > n_frames)
    return AcousticWindow(start, stop, clipped, n_frames)
