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
"""Neural network building blocks on top of :mod:`lfad.api.tensor`."""

from __future__ import annotations

import math
from typing import Any, Iterator

import numpy as np
from cachetools.func import lru_cache

from lfad.api.errors import ConfigError, ContractError, DimensionError, EmptyMemoryError
from lfad.api.tensor import (
    Parameter,
    Tensor,
    as_tensor,
    concat,
    layer_norm,
    matmul,
    softmax,
    swish,
    take,
    where,
)


__all__ = [
    'Module',
    'Linear',
    'LayerNorm',
    'Embedding',
    'FeedForward',
    'MultiHeadAttention',
    'rotary_tables',
    'apply_rotary',
]


class Module:
    """Base class of all layers.

    Parameters and sub-modules are discovered from instance attributes (including lists and tuples
    of modules) in assignment order, so parameter names are attribute paths such as
    ``'decoder.blocks.0.cross_attn.w_k.weight'``.
    """

    training: bool = True

    def forward(self, *args: Any, **kwargs: Any) -> Any:
        """Compute the layer output."""
        raise NotImplementedError

    def __call__(self, *args: Any, **kwargs: Any) -> Any:
        """Alias of :meth:`forward`."""
        return self.forward(*args, **kwargs)

    def named_children(self) -> Iterator[tuple[str, Module]]:
        """Iterate over the direct sub-modules with their attribute names."""
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for index, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f'{name}.{index}', item

    def named_parameters(self, prefix: str = '') -> Iterator[tuple[str, Parameter]]:
        """Iterate over all parameters with their dotted attribute paths.

        The path is recorded as the parameter name the first time it is seen.

        Raises:
            ContractError:
                If the same parameter is reachable under two different paths.
        """
        seen: dict[int, str] = {}
        for name, param in self._named_parameters(prefix):
            if id(param) in seen:
                raise ContractError(
                    f'Parameter {seen[id(param)]!r} is registered twice (also as {name!r})',
                )
            seen[id(param)] = name
            if param.name is None:
                param.name = name
            yield name, param

    def _named_parameters(self, prefix: str) -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield f'{prefix}{name}', value
        for name, child in self.named_children():
            # pylint: disable-next=protected-access
            yield from child._named_parameters(f'{prefix}{name}.')

    def parameters(self) -> list[Parameter]:
        """Return all parameters in registration order."""
        return [param for _, param in self.named_parameters()]

    def zero_grad(self) -> None:
        """Reset the gradients of all parameters."""
        for param in self.parameters():
            param.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        """Return a mapping from parameter name to a copy of its value."""
        return {name: param.data.copy() for name, param in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        """Overwrite parameter values from a mapping produced by :meth:`state_dict`.

        Raises:
            ContractError:
                If a parameter is missing from ``state`` or ``state`` has unknown entries.
            DimensionError:
                If a stored array has the wrong shape.
        """
        named = dict(self.named_parameters())
        missing = sorted(set(named).difference(state))
        unexpected = sorted(set(state).difference(named))
        if missing or unexpected:
            raise ContractError(f'State mismatch: missing={missing}, unexpected={unexpected}')
        for name, param in named.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != param.shape:
                raise DimensionError(
                    f'Stored parameter {name!r} has the wrong shape',
                    value.shape,
                    param.shape,
                )
            param.data = value.copy()

    def num_parameters(self) -> int:
        """Return the number of trainable scalars."""
        return sum(param.size for param in self.parameters())


class Linear(Module):
    """Affine map ``y = x W + b``.

    Weights are drawn from ``uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))``.
    """

    def __init__(
        self,
        in_features: int,
        out_features: int,
        rng: np.random.Generator,
        bias: bool = True,
    ) -> None:
        """Initialize the layer from the given random generator."""
        bound = 1.0 / math.sqrt(in_features)
        self.weight = Parameter(rng.uniform(-bound, bound, size=(in_features, out_features)))
        self.bias = Parameter(rng.uniform(-bound, bound, size=(out_features,))) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        """Apply the affine map to the last axis."""
        out = matmul(x, self.weight)
        if self.bias is not None:
            out = out + self.bias
        return out


class LayerNorm(Module):
    """Layer normalization over the last axis with a learned gain and bias."""

    def __init__(self, features: int, eps: float = 1e-5) -> None:
        """Initialize with unit gain and zero bias."""
        self.gain = Parameter(np.ones(features))
        self.bias = Parameter(np.zeros(features))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        """Normalize ``x``."""
        return layer_norm(x, self.gain, self.bias, self.eps)


class Embedding(Module):
    """Token embedding table initialized from ``normal(0, 0.02)``."""

    def __init__(self, num_embeddings: int, features: int, rng: np.random.Generator) -> None:
        """Initialize the table from the given random generator."""
        self.table = Parameter(rng.normal(0.0, 0.02, size=(num_embeddings, features)))

    def forward(self, ids: np.ndarray) -> Tensor:
        """Look up the rows of ``ids``."""
        return take(self.table, ids)


class FeedForward(Module):
    """Position-wise two-layer network with a swish activation."""

    def __init__(self, features: int, hidden: int, rng: np.random.Generator) -> None:
        """Initialize both projections."""
        self.w_in = Linear(features, hidden, rng)
        self.w_out = Linear(hidden, features, rng)

    def forward(self, x: Tensor) -> Tensor:
        """Apply the network to every position."""
        return self.w_out(swish(self.w_in(x)))


@lru_cache(maxsize=32)
def _inverse_frequencies(head_dim: int) -> np.ndarray:
    inverse = 1.0 / (10000.0 ** (np.arange(0, head_dim, 2, dtype=np.float64) / head_dim))
    inverse.setflags(write=False)
    return inverse


def rotary_tables(head_dim: int, positions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return the cosine and sine tables of shape ``positions.shape + (head_dim,)``.

    Raises:
        ConfigError:
            If ``head_dim`` is odd.
    """
    if head_dim % 2 != 0:
        raise ConfigError(f'Rotary positions need an even head dimension, got {head_dim}')
    angles = np.asarray(positions, dtype=np.float64)[..., None] * _inverse_frequencies(head_dim)
    angles = np.concatenate([angles, angles], axis=-1)
    return np.cos(angles), np.sin(angles)


def _rotate_half(x: Tensor) -> Tensor:
    half = x.shape[-1] // 2
    return concat([-x[..., half:], x[..., :half]], axis=-1)


def apply_rotary(x: Tensor | np.ndarray, positions: np.ndarray) -> Tensor:
    """Rotate the last axis of ``x`` (shape ``(..., T, head_dim)``) by the absolute ``positions``.

    ``positions`` has shape ``(T,)`` or ``(B, T)``; a batch of positions is broadcast over the head
    axis of ``x`` (shape ``(B, H, T, head_dim)``).
    """
    x = as_tensor(x)
    positions = np.asarray(positions)
    cos, sin = rotary_tables(x.shape[-1], positions)
    if positions.ndim == 2 and x.ndim == 4:
        cos, sin = cos[:, None], sin[:, None]
    return x * cos + _rotate_half(x) * sin


class MultiHeadAttention(Module):
    """Multi-head scaled dot-product attention.

    Rotary positions are applied to queries and keys when positions are given. Masked entries are
    excluded from the softmax exactly (their logits are replaced by ``-inf``).
    """

    def __init__(self, features: int, heads: int, rng: np.random.Generator) -> None:
        """Initialize the four projections.

        Raises:
            ConfigError:
                If ``features`` is not divisible by ``heads``.
        """
        if heads < 1 or features % heads != 0:
            raise ConfigError(f'Model width {features} is not divisible by {heads} heads')
        self.heads = heads
        self.head_dim = features // heads
        self.w_q = Linear(features, features, rng)
        self.w_k = Linear(features, features, rng)
        self.w_v = Linear(features, features, rng)
        self.w_o = Linear(features, features, rng)

    def _split(self, x: Tensor) -> Tensor:
        batch, length, _ = x.shape
        return x.reshape(batch, length, self.heads, self.head_dim).transpose(0, 2, 1, 3)

    def project_query(self, x: Tensor, positions: np.ndarray | None = None) -> Tensor:
        """Project ``x`` of shape ``(B, T, d)`` to per-head queries ``(B, H, T, d/H)``."""
        q = self._split(self.w_q(x))
        return q if positions is None else apply_rotary(q, positions)

    def project_key_value(
        self,
        x: Tensor,
        positions: np.ndarray | None = None,
    ) -> tuple[Tensor, Tensor]:
        """Project ``x`` of shape ``(B, S, d)`` to per-head keys and values ``(B, H, S, d/H)``."""
        k = self._split(self.w_k(x))
        v = self._split(self.w_v(x))
        return (k if positions is None else apply_rotary(k, positions)), v

    def attend(self, q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None) -> Tensor:
        """Attend with per-head queries over per-head keys/values and merge the heads.

        Args:
            q (Tensor): Queries of shape ``(B, H, T, d/H)``.
            k (Tensor): Keys of shape ``(B, H, S, d/H)``.
            v (Tensor): Values of shape ``(B, H, S, d/H)``.
            mask (Optional[np.ndarray]):
                Boolean attendability broadcastable to ``(B, H, T, S)``.

        Returns:
            The merged output of shape ``(B, T, d)``.
        """
        if k.shape[-2] == 0:
            raise EmptyMemoryError('Attention over an empty memory (S = 0)')
        scores = matmul(q, k.swapaxes(-1, -2)) * (1.0 / math.sqrt(self.head_dim))
        if mask is not None:
            scores = where(mask, scores, -np.inf)
        context = matmul(softmax(scores, axis=-1), v)
        batch, _, length, _ = context.shape
        merged = context.transpose(0, 2, 1, 3).reshape(batch, length, self.heads * self.head_dim)
        return self.w_o(merged)

    # pylint: disable-next=too-many-arguments
    def forward(
        self,
        x_query: Tensor,
        x_memory: Tensor,
        mask: np.ndarray | None = None,
        query_positions: np.ndarray | None = None,
        memory_positions: np.ndarray | None = None,
    ) -> Tensor:
        """Attend from ``x_query`` (``(B, T, d)`` or ``(T, d)``) over ``x_memory``.

        Raises:
            EmptyMemoryError:
                If the memory has no rows.
            DimensionError:
                If the widths of the query and the memory differ.
        """
        x_query, x_memory = as_tensor(x_query), as_tensor(x_memory)
        if x_query.shape[-1] != x_memory.shape[-1]:
            raise DimensionError('query and memory widths differ', x_query.shape, x_memory.shape)
        if x_memory.shape[-2] == 0:
            raise EmptyMemoryError('Attention over an empty memory (S = 0)')
        unbatched = x_query.ndim == 2
        if unbatched:
            x_query = x_query.reshape(1, *x_query.shape)
            x_memory = x_memory.reshape(1, *x_memory.shape)
        q = self.project_query(x_query, query_positions)
        k, v = self.project_key_value(x_memory, memory_positions)
        out = self.attend(q, k, v, mask)
        if unbatched:
            out = out.reshape(*out.shape[1:])
        return out
