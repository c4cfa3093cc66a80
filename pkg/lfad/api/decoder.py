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
"""Autoregressive attention decoder with per-segment positional codes on the cross-attention memory.

Dot-product cross-attention is invariant to the order of its memory rows, so an attention
decoder cannot tell where it is inside a segment of encodings unless something in the encodings
carries position. Segments encoded in isolation carry it through their edge effects; long-form
encodings sliced out of a full stream do not. :class:`SegmentPE` restores the cue by adding
absolute position codes, restarting at zero for every segment, before the key and value
projections.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from lfad.api.errors import ConfigError, ContractError, EmptyMemoryError, SegmentTooLongError
from lfad.api.layers import Embedding, FeedForward, LayerNorm, Linear, Module, MultiHeadAttention
from lfad.api.tensor import Parameter, Tensor, as_tensor, concat, cross_entropy, no_grad
from lfad.api.vocab import BOS, EOS


__all__ = [
    'PE_KINDS',
    'DecoderConfig',
    'SegmentPE',
    'DecoderState',
    'DecoderBlock',
    'Decoder',
    'inject_segment_pe',
    'cross_attention',
    'aed_loss',
]


PE_KINDS = ('learned', 'sinusoidal')


@dataclass(frozen=True)
class DecoderConfig:
    """Architecture of the decoder."""

    blocks: int = 3
    d: int = 32
    heads: int = 4
    ff: int = 64
    p_max: int = 256
    pe_kind: str = 'learned'
    pe_enabled: bool = True
    pe_scale: float = 1.0

    def __post_init__(self) -> None:
        """Validate the architecture."""
        if self.blocks < 1:
            raise ConfigError(f'decoder.blocks must be positive, got {self.blocks}')
        if self.heads < 1 or self.d % self.heads != 0 or (self.d // self.heads) % 2 != 0:
            raise ConfigError(
                f'decoder.d={self.d} must split into {self.heads} heads of even dimension',
            )
        if self.p_max < 1:
            raise ConfigError(f'decoder.p_max must be positive, got {self.p_max}')
        if self.pe_kind not in PE_KINDS:
            raise ConfigError(
                f'Unknown decoder.pe_kind {self.pe_kind!r}, expected one of {PE_KINDS}',
            )


def _sinusoid_table(length: int, features: int) -> np.ndarray:
    positions = np.arange(length, dtype=np.float64)[:, None]
    rates = np.exp(-math.log(10000.0) * (np.arange(0, features, 2) / features))
    table = np.zeros((length, features))
    table[:, 0::2] = np.sin(positions * rates)
    table[:, 1::2] = np.cos(positions * rates[: features // 2])
    return table


class SegmentPE(Module):
    """Absolute position codes for the encodings of one segment.

    Indices restart at 0 for every segment. Lookup hooks receive the index array of every
    injection, which makes the per-segment reset observable.
    """

    def __init__(
        self,
        p_max: int,
        features: int,
        rng: np.random.Generator,
        kind: str = 'learned',
        scale: float = 1.0,
    ) -> None:
        """Create a learned (``normal(0, 0.02)``) or sinusoidal table of ``p_max`` codes."""
        self.p_max = p_max
        self.kind = kind
        self.scale = float(scale)
        if kind == 'learned':
            self.table: Tensor = Parameter(rng.normal(0.0, 0.02, size=(p_max, features)))
        else:
            self.table = Tensor(_sinusoid_table(p_max, features))
        self._hooks: list[Callable[[np.ndarray], None]] = []

    def add_lookup_hook(self, hook: Callable[[np.ndarray], None]) -> Callable[[], None]:
        """Register ``hook(indices)``; returns a function removing it."""
        self._hooks.append(hook)
        return lambda: self._hooks.remove(hook)

    def forward(self, h_seg: Tensor | np.ndarray) -> Tensor:
        """Add the codes ``0 .. S-1`` to the rows of ``h_seg`` (``(S, d)`` or ``(B, S, d)``).

        Raises:
            SegmentTooLongError:
                If ``S > p_max``.
        """
        h_seg = as_tensor(h_seg)
        length = h_seg.shape[-2]
        if length > self.p_max:
            raise SegmentTooLongError(length, self.p_max)
        indices = np.arange(length)
        for hook in tuple(self._hooks):
            hook(indices)
        return h_seg + self.table[:length] * self.scale


def inject_segment_pe(h_seg: Tensor | np.ndarray, pe: SegmentPE, enabled: bool) -> Tensor:
    """Add per-segment position codes to the encodings of one segment when ``enabled``.

    Disabled injection is the identity.

    Raises:
        SegmentTooLongError:
            If enabled and the segment is longer than the table.
    """
    if not enabled:
        return as_tensor(h_seg)
    return pe(h_seg)


class DecoderBlock(Module):
    """Pre-norm block: causal self-attention, cross-attention, feed-forward."""

    def __init__(self, config: DecoderConfig, rng: np.random.Generator) -> None:
        """Initialize the block."""
        self.norm_self = LayerNorm(config.d)
        self.self_attn = MultiHeadAttention(config.d, config.heads, rng)
        self.norm_cross = LayerNorm(config.d)
        self.cross_attn = MultiHeadAttention(config.d, config.heads, rng)
        self.norm_ff = LayerNorm(config.d)
        self.ff = FeedForward(config.d, config.ff, rng)


def cross_attention(
    attention: MultiHeadAttention,
    queries: Tensor | np.ndarray,
    memory: Tensor | np.ndarray,
    memory_mask: np.ndarray | None = None,
) -> Tensor:
    """Unmasked multi-head attention from decoder ``queries`` over a segment ``memory``.

    Memory rows carry no position of their own, so without segment codes the output is invariant to
    any permutation of the rows.

    Raises:
        EmptyMemoryError:
            If the memory has no rows.
    """
    memory = as_tensor(memory)
    if memory.shape[-2] == 0:
        raise EmptyMemoryError('Cross-attention over an empty segment (S = 0)')
    mask = None if memory_mask is None else np.asarray(memory_mask, dtype=bool)[:, None, None, :]
    return attention(queries, memory, mask)


@dataclass(frozen=True)
class DecoderState:
    """Incremental decoding state ``C_<u``.

    ``self_kv`` caches the rotated keys and values of the tokens fed so far, per block; its length
    equals ``len(tokens)``. ``cross_kv`` holds the projected segment memory, per block.
    """

    self_kv: tuple[tuple[Tensor, Tensor] | None, ...]
    cross_kv: tuple[tuple[Tensor, Tensor], ...]
    tokens: tuple[int, ...] = ()

    def __len__(self) -> int:
        """Return the number of tokens fed so far."""
        return len(self.tokens)


class Decoder(Module):
    """Autoregressive decoder ``y_u = D(y_{u-1}, C_<u, H)``."""

    def __init__(self, config: DecoderConfig, vocab_size: int, rng: np.random.Generator) -> None:
        """Initialize all layers from the given random generator."""
        self.config = config
        self.vocab_size = vocab_size
        self.embedding = Embedding(vocab_size, config.d, rng)
        self.segment_pe = SegmentPE(config.p_max, config.d, rng, config.pe_kind, config.pe_scale)
        self.blocks = [DecoderBlock(config, rng) for _ in range(config.blocks)]
        self.norm = LayerNorm(config.d)
        self.output = Linear(config.d, vocab_size, rng)

    def prepare_memory(self, h_seg: Tensor | np.ndarray) -> Tensor:
        """Inject the segment codes into segment encodings according to the configuration."""
        return inject_segment_pe(h_seg, self.segment_pe, self.config.pe_enabled)

    def forward(
        self,
        memory: Tensor | np.ndarray,
        tokens: Sequence[int] | np.ndarray,
        memory_mask: np.ndarray | None = None,
    ) -> Tensor:
        """Parallel logits ``(B, U, V)`` for input ``tokens`` ``(B, U)`` or unbatched ``(U,)``.

        ``memory`` holds segment encodings with the codes already injected, ``(B, S, d)`` or
        ``(S, d)``; ``memory_mask`` flags the valid rows of a padded memory.
        """
        memory = as_tensor(memory)
        tokens = np.asarray(tokens, dtype=np.int64)
        unbatched = tokens.ndim == 1
        if unbatched:
            tokens = tokens[None]
            memory = memory.reshape(1, *memory.shape)
        length = tokens.shape[1]
        causal = np.tril(np.ones((length, length), dtype=bool))[None, None]
        positions = np.arange(length)

        x = self.embedding(tokens)
        for block in self.blocks:
            h = block.norm_self(x)
            x = x + block.self_attn(h, h, causal, positions, positions)
            x = x + cross_attention(block.cross_attn, block.norm_cross(x), memory, memory_mask)
            x = x + block.ff(block.norm_ff(x))
        logits = self.output(self.norm(x))
        return logits.reshape(*logits.shape[1:]) if unbatched else logits

    def init_state(self, memory: Tensor | np.ndarray) -> DecoderState:
        """Project the segment memory ``(S, d)`` (codes injected) for incremental decoding.

        Raises:
            EmptyMemoryError:
                If the memory has no rows.
        """
        memory = as_tensor(memory)
        if memory.shape[-2] == 0:
            raise EmptyMemoryError('Cannot decode an empty segment (S = 0)')
        with no_grad():
            batched = memory.reshape(1, *memory.shape[-2:])
            cross_kv = tuple(block.cross_attn.project_key_value(batched) for block in self.blocks)
        return DecoderState(self_kv=(None,) * len(self.blocks), cross_kv=cross_kv)

    def decode_step(
        self,
        state: DecoderState,
        prev_token: int,
    ) -> tuple[np.ndarray, DecoderState]:
        """Feed ``prev_token`` (BOS first) and return the next-token logits ``[V]`` and new state.

        Raises:
            TokenIndexError:
                If ``prev_token`` is not a valid id.
        """
        position = np.array([len(state.tokens)])
        new_kv = []
        with no_grad():
            x = self.embedding(np.array([[prev_token]]))
            for block, cache, (cross_k, cross_v) in zip(self.blocks, state.self_kv, state.cross_kv):
                h = block.norm_self(x)
                q = block.self_attn.project_query(h, position)
                k, v = block.self_attn.project_key_value(h, position)
                if cache is not None:
                    k = concat([cache[0], k], axis=2)
                    v = concat([cache[1], v], axis=2)
                new_kv.append((k, v))
                x = x + block.self_attn.attend(q, k, v)
                q_cross = block.cross_attn.project_query(block.norm_cross(x))
                x = x + block.cross_attn.attend(q_cross, cross_k, cross_v)
                x = x + block.ff(block.norm_ff(x))
            logits = self.output(self.norm(x)).data.reshape(-1)
        return logits, DecoderState(tuple(new_kv), state.cross_kv, (*state.tokens, int(prev_token)))


def aed_loss(decoder: Decoder, h_seg_pe: Tensor | np.ndarray, targets: Sequence[int]) -> Tensor:
    """Cross-entropy of ``targets`` (ending with EOS) given their reference prefix and the memory.

    ``h_seg_pe`` holds only the encodings of the segment, with the codes already injected.

    Raises:
        ContractError:
            If ``targets`` is empty or does not end with EOS.
    """
    targets = [int(token) for token in targets]
    if not targets or targets[-1] != EOS:
        raise ContractError(f'AED targets must be nonempty and end with EOS, got {targets}')
    inputs = [BOS, *targets[:-1]]
    logits = decoder.forward(h_seg_pe, inputs)
    return cross_entropy(logits, targets)
