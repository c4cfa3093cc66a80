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
"""CTC head: log-space forward-backward loss, best-path decoding and segment extraction."""

from __future__ import annotations

from typing import NamedTuple, Sequence

import numpy as np

from lfad.api.errors import ContractError, DimensionError, InfeasibleAlignmentError, TokenIndexError
from lfad.api.layers import Linear, Module
from lfad.api.stream import Segment
from lfad.api.tensor import Tensor, as_tensor, custom_op, log_softmax
from lfad.api.vocab import BLANK, SEG_END


__all__ = [
    'CtcOutput',
    'CtcHead',
    'GreedyPath',
    'SegmentSplit',
    'ctc_loss',
    'ctc_greedy',
    'extract_segments',
    'min_frames',
]


class CtcOutput:
    """A CTC lattice: per-frame log-probabilities ``(T, V)`` over the vocabulary.

    Raises:
        DimensionError:
            If the lattice is not a matrix.
        ContractError:
            If a row is not log-normalized within ``1e-9``.
    """

    def __init__(
        self,
        log_probs: Tensor | np.ndarray,
        blank: int = BLANK,
        seg_end: int = SEG_END,
    ) -> None:
        """Wrap a log-normalized lattice."""
        self.log_probs = as_tensor(log_probs)
        if self.log_probs.ndim != 2:
            raise DimensionError(
                'a CTC lattice must be a (frames, vocabulary) matrix',
                self.log_probs.shape,
            )
        with np.errstate(under='ignore'):
            totals = np.logaddexp.reduce(self.log_probs.data, axis=-1)
        if totals.size and np.abs(totals).max() > 1e-9:
            raise ContractError(
                'CTC lattice rows are not log-normalized '
                f'(max |logsumexp| = {np.abs(totals).max():.3g})',
            )
        self.blank = blank
        self.seg_end = seg_end

    @classmethod
    def from_logits(
        cls,
        logits: Tensor | np.ndarray,
        blank: int = BLANK,
        seg_end: int = SEG_END,
    ) -> CtcOutput:
        """Normalize unnormalized scores ``(T, V)`` into a lattice."""
        return cls(log_softmax(as_tensor(logits), axis=-1), blank, seg_end)

    @property
    def values(self) -> np.ndarray:
        """The log-probabilities as an array."""
        return self.log_probs.data

    @property
    def n_frames(self) -> int:
        """The number of frames ``T``."""
        return self.log_probs.shape[0]

    @property
    def vocab_size(self) -> int:
        """The vocabulary size ``V``."""
        return self.log_probs.shape[1]

    def slice(self, segment: Segment) -> CtcOutput:
        """Return the lattice rows of ``segment``."""
        return CtcOutput(self.log_probs[segment.t_b : segment.t_e + 1], self.blank, self.seg_end)

    def __len__(self) -> int:
        """Return the number of frames ``T``."""
        return self.n_frames

    def __repr__(self) -> str:
        """Return a string representation of the lattice."""
        return f'{self.__class__.__name__}(T={self.n_frames}, V={self.vocab_size})'


class CtcHead(Module):
    """Linear projection of the encodings followed by a log-softmax over the vocabulary."""

    def __init__(self, features: int, vocab_size: int, rng: np.random.Generator) -> None:
        """Initialize the projection."""
        self.proj = Linear(features, vocab_size, rng)

    def forward(self, encodings: Tensor) -> Tensor:
        """Return log-probabilities with the leading shape of ``encodings``."""
        return log_softmax(self.proj(encodings), axis=-1)

    def lattice(self, encodings: Tensor) -> CtcOutput:
        """Return the lattice of unbatched encodings ``(T, d)``."""
        return CtcOutput(self.forward(encodings))


def min_frames(target: Sequence[int]) -> int:
    """Return the fewest frames that can emit ``target``: one per token plus one per repeat."""
    repeats = sum(1 for prev, token in zip(target, target[1:]) if prev == token)
    return len(target) + repeats


def _extended(target: Sequence[int], blank: int) -> np.ndarray:
    extended = np.full(2 * len(target) + 1, blank, dtype=np.int64)
    extended[1::2] = target
    return extended


def _forward_variables(lp: np.ndarray, ext: np.ndarray, skip: np.ndarray) -> np.ndarray:
    T, S = lp.shape[0], ext.size  # noqa: N806
    alpha = np.full((T, S), -np.inf)
    alpha[0, 0] = lp[0, ext[0]]
    if S > 1:
        alpha[0, 1] = lp[0, ext[1]]
    for t in range(1, T):
        prev = alpha[t - 1]
        current = prev.copy()
        current[1:] = np.logaddexp(current[1:], prev[:-1])
        current[2:] = np.where(skip[2:], np.logaddexp(current[2:], prev[:-2]), current[2:])
        alpha[t] = current + lp[t, ext]
    return alpha


def _backward_variables(lp: np.ndarray, ext: np.ndarray, skip: np.ndarray) -> np.ndarray:
    T, S = lp.shape[0], ext.size  # noqa: N806
    beta = np.full((T, S), -np.inf)
    beta[T - 1, S - 1] = lp[T - 1, ext[S - 1]]
    if S > 1:
        beta[T - 1, S - 2] = lp[T - 1, ext[S - 2]]
    for t in range(T - 2, -1, -1):
        succ = beta[t + 1]
        current = succ.copy()
        current[:-1] = np.logaddexp(current[:-1], succ[1:])
        current[:-2] = np.where(skip[2:], np.logaddexp(current[:-2], succ[2:]), current[:-2])
        beta[t] = current + lp[t, ext]
    return beta


def ctc_loss(lattice: CtcOutput, target: Sequence[int]) -> Tensor:
    """Negative log-likelihood ``-log P(target | lattice)`` summed over all CTC alignments.

    The forward and backward variables are computed in log space; the gradient w.r.t. each
    lattice entry is minus the posterior occupancy of its label at its frame.

    Args:
        lattice (CtcOutput):
            The per-frame log-probabilities.
        target (Sequence[int]):
            Token ids without blanks.

    Returns:
        A scalar tensor connected to ``lattice.log_probs``.

    Raises:
        TokenIndexError:
            If a target id is outside the vocabulary.
        ContractError:
            If the target contains the blank id.
        InfeasibleAlignmentError:
            If the target needs more frames than the lattice has.

    Examples:
        >>> lattice = CtcOutput(np.log(np.full((1, 4), 0.25)))
        >>> ctc_loss(lattice, [2]).item()  # -log 0.25
        1.3862943611198906
    """
    target = [int(token) for token in target]
    T, V = lattice.n_frames, lattice.vocab_size  # noqa: N806
    for token in target:
        if not 0 <= token < V:
            raise TokenIndexError(f'Target id {token} is out of range [0, {V}).')
        if token == lattice.blank:
            raise ContractError('CTC targets must not contain the blank id')
    needed = min_frames(target)
    if needed > T:
        raise InfeasibleAlignmentError(
            f'A target of {len(target)} tokens needs at least {needed} frames, the lattice has {T}',
        )

    lp = lattice.values
    ext = _extended(target, lattice.blank)
    skip = np.zeros(ext.size, dtype=bool)
    skip[2:] = (ext[2:] != lattice.blank) & (ext[2:] != ext[:-2])
    with np.errstate(divide='ignore', invalid='ignore', under='ignore'):
        alpha = _forward_variables(lp, ext, skip)
        log_likelihood = np.logaddexp.reduce(alpha[-1, -2:])

    def grad_fn(g: np.ndarray) -> tuple[np.ndarray]:
        with np.errstate(divide='ignore', invalid='ignore', under='ignore'):
            beta = _backward_variables(lp, ext, skip)
            gamma = alpha + beta - lp[:, ext]
            occupancy = np.full((T, V), -np.inf)
            for label in np.unique(ext):
                occupancy[:, label] = np.logaddexp.reduce(gamma[:, ext == label], axis=1)
            posterior = np.exp(occupancy - log_likelihood)
        return (-g * posterior,)

    return custom_op(-log_likelihood, (lattice.log_probs,), grad_fn)


class GreedyPath(NamedTuple):
    """Best-path tokens with the frame at which each was first emitted."""

    tokens: list[int]
    frames: list[int]


def ctc_greedy(lattice: CtcOutput) -> GreedyPath:
    """Best-path decoding: per-frame argmax, collapse repeats, drop blanks.

    Examples:
        >>> a, blank = 4, 0
        >>> path = ctc_greedy(CtcOutput(np.log(np.eye(5)[[a, a, blank, a]] * 0.95 + 0.01)))
        >>> path.tokens, path.frames
        ([4, 4], [0, 3])
    """
    best = np.argmax(lattice.values, axis=-1)
    tokens, frames = [], []
    previous = None
    for frame, token in enumerate(best.tolist()):
        if token != lattice.blank and token != previous:
            tokens.append(int(token))
            frames.append(frame)
        previous = token
    return GreedyPath(tokens, frames)


class SegmentSplit(NamedTuple):
    """Segments cut at segmentation-token emissions and the number of degenerate ones dropped."""

    segments: list[Segment]
    dropped: int


def extract_segments(
    tokens: Sequence[int],
    frames: Sequence[int],
    n_frames: int,
    seg_end: int = SEG_END,
) -> SegmentSplit:
    """Split the encoding-frame axis ``[0, n_frames)`` at every emitted segmentation token.

    The frame of a segmentation token belongs to the segment it closes. A closed segment without
    any content token is degenerate and dropped. Frames after the last segmentation token form a
    final ``open`` segment.

    Raises:
        ContractError:
            If ``tokens`` and ``frames`` differ in length or the frames decrease.

    Examples:
        >>> split = extract_segments([5, 3, 6, 3, 7], [2, 5, 8, 11, 12], n_frames=14)
        >>> [(segment.t_b, segment.t_e, segment.open) for segment in split.segments]
        [(0, 5, False), (6, 11, False), (12, 13, True)]
    """
    if len(tokens) != len(frames):
        raise ContractError(f'{len(tokens)} tokens but {len(frames)} frames')
    if any(later < earlier for earlier, later in zip(frames, frames[1:])):
        raise ContractError('Token frames must be nondecreasing')

    segments: list[Segment] = []
    dropped = 0
    start = 0
    content: list[int] = []
    for token, frame in zip(tokens, frames):
        if token != seg_end:
            content.append(int(token))
            continue
        if content and frame >= start:
            segments.append(Segment(start, int(frame), tuple(content)))
        else:
            dropped += 1
        start = max(start, int(frame) + 1)
        content = []
    if start < n_frames:
        segments.append(Segment(start, n_frames - 1, tuple(content), open=True))
    return SegmentSplit(segments, dropped)
