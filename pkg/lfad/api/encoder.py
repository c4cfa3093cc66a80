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
"""Context-limited acoustic encoder.

A strided linear frontend decimates time by ``R``; ``L`` blocks of chunk-masked self-attention
with rotary positions, a feed-forward network and a chunk-local mixing step follow, each with a
pre-norm residual connection.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass
from typing import Any, Iterable, Sequence

import numpy as np

from lfad.api.errors import AlignmentError, ConfigError, DimensionError, TooShortInputError
from lfad.api.layers import (
    FeedForward,
    LayerNorm,
    Linear,
    Module,
    MultiHeadAttention,
    apply_rotary,
)
from lfad.api.masking import (
    ContextProfile,
    MaskSpec,
    build_layer_mask,
    context_profile,
    mixing_mask,
)
from lfad.api.stream import AcousticStream, Segment
from lfad.api.tensor import Parameter, Tensor, as_tensor, concat, no_grad, swish


__all__ = [
    'EncoderConfig',
    'EncodingSequence',
    'LocalMixing',
    'EncoderBlock',
    'Encoder',
    'rotary_positions',
]


LOGGER = logging.getLogger(__name__)


@dataclass(frozen=True)
class EncoderConfig:  # pylint: disable=too-many-instance-attributes
    """Architecture of the encoder (and the shared vocabulary size).

    ``M_list`` holds the chunk sizes sampled during training; the first entry is the default
    chunk size at inference.
    """

    L: int = 2  # noqa: N815
    N: int = 4  # noqa: N815
    M_list: tuple[int, ...] = (2, 8)  # noqa: N815
    R: int = 2  # noqa: N815
    d: int = 32
    heads: int = 4
    ff: int = 64
    feature_dim: int = 8
    vocab_size: int = 16
    seed: int = 0
    lookback: str = 'frame'

    def __post_init__(self) -> None:
        """Validate the architecture."""
        object.__setattr__(self, 'M_list', tuple(int(m) for m in self.M_list))
        if not self.M_list or min(self.M_list) < 1:
            raise ConfigError(f'encoder.M_list must hold positive chunk sizes, got {self.M_list}')
        if self.heads < 1 or self.d % self.heads != 0:
            raise ConfigError(f'encoder.d={self.d} is not divisible by encoder.heads={self.heads}')
        if (self.d // self.heads) % 2 != 0:
            raise ConfigError(
                f'Rotary positions need an even head dimension, got {self.d // self.heads}',
            )
        if self.vocab_size < 5:
            raise ConfigError(
                f'encoder.vocab_size must hold 4 reserved ids and a token, got {self.vocab_size}',
            )
        self.mask_spec()  # validates L, N, M, R

    def mask_spec(self, chunk_size: int | None = None) -> MaskSpec:
        """Return the mask geometry, optionally with another chunk size."""
        spec = MaskSpec(self.L, self.N, self.M_list[0], self.R, lookback=self.lookback)
        return spec if chunk_size is None else spec.with_chunk_size(chunk_size)


@dataclass
class EncodingSequence:
    """Acoustic encodings ``H`` of shape ``(T, d)`` with their context profile."""

    encodings: Tensor
    profile: ContextProfile
    spec: MaskSpec
    offset: int = 0

    @property
    def values(self) -> np.ndarray:
        """The encodings as an array."""
        return self.encodings.data

    def __len__(self) -> int:
        """Return the number of encoding frames ``T``."""
        return self.encodings.shape[0]

    def slice(self, segment: Segment) -> Tensor:
        """Return the encodings of ``segment`` (frames relative to the first encoding)."""
        return self.encodings[segment.t_b : segment.t_e + 1]


def rotary_positions(
    q: Tensor | np.ndarray,
    k: Tensor | np.ndarray,
    q_offset: int | np.ndarray = 0,
    k_offset: int | np.ndarray | None = None,
) -> tuple[Tensor, Tensor]:
    """Rotate per-head queries and keys ``(..., T, head_dim)`` by their absolute frame indices.

    An integer offset stands for the positions ``offset, offset + 1, ...`` along the time axis.

    Raises:
        ConfigError:
            If the head dimension is odd.

    Examples:
        >>> q, k = rotary_positions(np.ones((1, 4)), np.ones((1, 4)), 0)  # position 0: identity
    """
    q, k = as_tensor(q), as_tensor(k)
    if k_offset is None:
        k_offset = q_offset

    def positions(offset: int | np.ndarray, length: int) -> np.ndarray:
        if isinstance(offset, (int, np.integer)):
            return np.arange(length) + int(offset)
        return np.asarray(offset)

    return (
        apply_rotary(q, positions(q_offset, q.shape[-2])),
        apply_rotary(k, positions(k_offset, k.shape[-2])),
    )


class LocalMixing(Module):
    """Depthwise mixing of each frame with its successor, never crossing a chunk boundary.

    The mixing reach stays inside the chunk, so it adds nothing to the receptive field computed
    from the attention masks.
    """

    def __init__(self, features: int, rng: np.random.Generator) -> None:
        """Initialize the depthwise taps and the pointwise projection."""
        bound = 1.0 / np.sqrt(2.0)
        self.w_self = Parameter(rng.uniform(-bound, bound, size=(features,)))
        self.w_next = Parameter(rng.uniform(-bound, bound, size=(features,)))
        self.pointwise = Linear(features, features, rng)

    def forward(self, x: Tensor, successor: np.ndarray) -> Tensor:
        """Mix ``x`` of shape ``(B, T, d)``; ``successor[b, t]`` allows reading frame ``t + 1``."""
        batch, _, features = x.shape
        shifted = concat([x[:, 1:], np.zeros((batch, 1, features))], axis=1)
        mixed = x * self.w_self + shifted * successor[..., None].astype(np.float64) * self.w_next
        return self.pointwise(swish(mixed))


class EncoderBlock(Module):
    """Pre-norm block: masked self-attention, feed-forward, local mixing."""

    def __init__(self, config: EncoderConfig, rng: np.random.Generator) -> None:
        """Initialize the block."""
        self.norm_attn = LayerNorm(config.d)
        self.attn = MultiHeadAttention(config.d, config.heads, rng)
        self.norm_ff = LayerNorm(config.d)
        self.ff = FeedForward(config.d, config.ff, rng)
        self.norm_mix = LayerNorm(config.d)
        self.mixing = LocalMixing(config.d, rng)

    def forward(
        self,
        x: Tensor,
        mask: np.ndarray,
        positions: np.ndarray,
        successor: np.ndarray,
    ) -> Tensor:
        """Apply the block to ``x`` of shape ``(B, T, d)``."""
        h = self.norm_attn(x)
        x = x + self.attn(h, h, mask, positions, positions)
        x = x + self.ff(self.norm_ff(x))
        return x + self.mixing(self.norm_mix(x), successor)


class Encoder(Module):
    """Acoustic encoder ``H = E(X)``.

    Chunk boundaries and rotary angles use absolute encoding-frame indices, so encoding a window
    that starts at frame ``offset`` of a stream reproduces the chunk grid of the full stream.

    Attributes:
        forward_calls (int):
            Number of encoder forward passes so far (full or streaming), counted under a lock so
            that threads sharing the encoder all register. Copies start from the current count;
            worker processes count on their own copy.
    """

    def __init__(self, config: EncoderConfig, rng: np.random.Generator) -> None:
        """Initialize all layers from the given random generator."""
        self.config = config
        self.frontend = Linear(config.R * config.feature_dim, config.d, rng)
        self.blocks = [EncoderBlock(config, rng) for _ in range(config.L)]
        self.norm = LayerNorm(config.d)
        self.forward_calls = 0
        self._calls_lock = threading.Lock()

    def __getstate__(self) -> dict[str, Any]:
        """Return the picklable state (locks are not)."""
        state = self.__dict__.copy()
        del state['_calls_lock']
        return state

    def __setstate__(self, state: dict[str, Any]) -> None:
        """Restore the state with a fresh lock."""
        self.__dict__.update(state)
        self._calls_lock = threading.Lock()

    def _count_forward(self) -> None:
        with self._calls_lock:
            self.forward_calls += 1

    def downsample_frontend(self, features: Tensor | np.ndarray) -> Tensor:
        """Project non-overlapping windows of ``R`` acoustic frames to one encoding each.

        Args:
            features: Acoustic features ``(T', F)`` or a batch ``(B, T', F)``.

        Returns:
            Encodings ``(T, d)`` (or ``(B, T, d)``) with ``T = floor(T' / R)``.

        Raises:
            TooShortInputError:
                If ``T' < R``.
            DimensionError:
                If the feature dimension does not match the configuration.
        """
        features = as_tensor(features)
        R = self.config.R  # noqa: N806
        unbatched = features.ndim == 2
        if unbatched:
            features = features.reshape(1, *features.shape)
        batch, n_frames, dims = features.shape
        if dims != self.config.feature_dim:
            raise DimensionError(
                'unexpected feature dimension',
                (dims,),
                (self.config.feature_dim,),
            )
        if n_frames < R:
            raise TooShortInputError(f'Stream of {n_frames} acoustic frames is shorter than R={R}')
        T = n_frames // R  # noqa: N806
        windows = features[:, : T * R].reshape(batch, T, R * dims)
        out = self.frontend(windows)
        return out.reshape(T, -1) if unbatched else out

    def forward(
        self,
        features: Tensor | np.ndarray,
        frame_counts: Sequence[int] | np.ndarray | None = None,
        offsets: Sequence[int] | np.ndarray | None = None,
        chunk_size: int | None = None,
    ) -> Tensor:
        """Encode a zero-padded batch of acoustic features ``(B, T', F)`` to ``(B, T, d)``.

        Args:
            features: The padded acoustic features.
            frame_counts: Valid encoding frames per example (defaults to all frames).
            offsets: Absolute encoding-frame index of the first frame of each example.
            chunk_size: Chunk size override (defaults to the first configured chunk size).

        Padded frames never influence valid frames.
        """
        self._count_forward()
        spec = self.config.mask_spec(chunk_size)
        x = self.downsample_frontend(features)
        if x.ndim == 2:
            x = x.reshape(1, *x.shape)
        batch, T, _ = x.shape  # noqa: N806
        counts = np.full(batch, T)
        if frame_counts is not None:
            counts = np.asarray(frame_counts, dtype=np.int64)
        starts = np.zeros(batch, dtype=np.int64)
        if offsets is not None:
            starts = np.asarray(offsets, dtype=np.int64)

        valid = np.arange(T)[None, :] < counts[:, None]
        chunk_masks = np.stack([build_layer_mask(spec, T, 0, int(start)) for start in starts])
        mask = chunk_masks & (valid[:, None, :] | ~valid[:, :, None])
        successor = np.stack([mixing_mask(spec, T, int(start)) for start in starts])
        successor[:, :-1] &= valid[:, 1:]
        positions = starts[:, None] + np.arange(T)[None, :]

        for block in self.blocks:
            x = block(x, mask[:, None], positions, successor)
        return self.norm(x)

    def encode(
        self,
        stream: AcousticStream | np.ndarray,
        offset: int = 0,
        chunk_size: int | None = None,
    ) -> EncodingSequence:
        """Encode one stream and attach its context profile.

        Args:
            stream: The acoustic stream (or its feature matrix).
            offset: Absolute encoding-frame index of the first frame (chunk grid phase).
            chunk_size: Chunk size override for inference.
        """
        features = stream.features if isinstance(stream, AcousticStream) else np.asarray(stream)
        encodings = self.forward(features[None], offsets=[offset], chunk_size=chunk_size)
        encodings = encodings.reshape(*encodings.shape[1:])
        spec = self.config.mask_spec(chunk_size)
        profile = context_profile(spec, encodings.shape[0], offset)
        return EncodingSequence(encodings, profile, spec, offset)

    # pylint: disable-next=too-many-locals
    def streaming_encode(
        self,
        chunks: Iterable[np.ndarray],
        offset: int = 0,
        chunk_size: int | None = None,
        cache_frames: int | None = None,
    ) -> EncodingSequence:
        """Encode a stream chunk by chunk, caching the last layer inputs of every block.

        Every chunk but the last must hold a multiple of ``M * R`` acoustic frames. Each block
        keeps ``cache_frames`` (default ``N``) frames of its input as left context.

        Raises:
            AlignmentError:
                If a non-final chunk or the offset is not aligned to the chunk grid.
        """
        spec = self.config.mask_spec(chunk_size)
        step = spec.M * spec.R
        keep = spec.N if cache_frames is None else int(cache_frames)
        if offset % spec.M != 0:
            raise AlignmentError(
                f'Streaming offset {offset} is not a multiple of the chunk size {spec.M}',
            )

        self._count_forward()
        chunks = [np.asarray(chunk, dtype=np.float64) for chunk in chunks]
        caches: list[Tensor | None] = [None] * len(self.blocks)
        outputs: list[Tensor] = []
        position = offset
        with no_grad():
            for index, chunk in enumerate(chunks):
                final = index == len(chunks) - 1
                if not final and chunk.shape[0] % step != 0:
                    raise AlignmentError(
                        f'Chunk {index} holds {chunk.shape[0]} acoustic frames, '
                        f'not a multiple of M*R={step}',
                    )
                n_new = chunk.shape[0] // spec.R
                if n_new == 0:
                    continue
                x = self.downsample_frontend(chunk[None])
                for layer, block in enumerate(self.blocks):
                    cache = caches[layer]
                    inputs = x if cache is None else concat([cache, x], axis=1)
                    length = inputs.shape[1]
                    start = position - (length - n_new)
                    mask = build_layer_mask(spec, length, layer, start)[None, None]
                    successor = mixing_mask(spec, length, start)[None]
                    positions = (start + np.arange(length))[None]
                    out = block(inputs, mask, positions, successor)
                    caches[layer] = inputs[:, max(length - keep, 0) :] if keep > 0 else None
                    x = out[:, length - n_new :]
                outputs.append(self.norm(x))
                position += n_new
        if not outputs:
            raise TooShortInputError(
                f'Streams shorter than R={spec.R} acoustic frames cannot be encoded',
            )
        encodings = concat(outputs, axis=1)
        encodings = encodings.reshape(*encodings.shape[1:])
        T = encodings.shape[0]  # noqa: N806
        LOGGER.debug('Streamed %d chunks into %d encodings.', len(chunks), T)
        return EncodingSequence(encodings, context_profile(spec, T, offset), spec, offset)

