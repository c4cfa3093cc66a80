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
"""Token vocabulary with the reserved ids shared by the CTC and attention heads."""

from __future__ import annotations

import os
from typing import Iterable, Sequence

from lfad.api.errors import ConfigError, TokenIndexError


__all__ = ['BLANK', 'BOS', 'EOS', 'SEG_END', 'RESERVED', 'Vocabulary', 'strip_special']


BLANK: int = 0
BOS: int = 1
EOS: int = 2
SEG_END: int = 3
RESERVED: tuple[str, ...] = ('<blank>', '<s>', '</s>', '_segE')


def strip_special(
    tokens: Iterable[int],
    remove: Iterable[int] = (BLANK, BOS, EOS, SEG_END),
) -> list[int]:
    """Drop reserved ids from a token sequence.

    Examples:
        >>> strip_special([5, 3, 6, 2])
        [5, 6]
    """
    remove = set(remove)
    return [int(token) for token in tokens if int(token) not in remove]


class Vocabulary:
    """A token vocabulary.

    Ids 0 to 3 are reserved for the CTC blank, BOS, EOS and the segmentation token ``_segE``;
    content tokens follow. The file format holds one token per line in id order.

    Examples:
        >>> vocab = Vocabulary.synthetic(3)
        >>> len(vocab), vocab.tokens[4:]
        (7, ('w0', 'w1', 'w2'))
    """

    def __init__(self, tokens: Sequence[str]) -> None:
        """Create a vocabulary from the ordered token list, reserved tokens included.

        Raises:
            ConfigError:
                If the reserved tokens are missing or a token is repeated.
        """
        tokens = tuple(tokens)
        if tokens[: len(RESERVED)] != RESERVED:
            raise ConfigError(f'A vocabulary must start with the reserved tokens {RESERVED}')
        if len(set(tokens)) != len(tokens):
            raise ConfigError('A vocabulary must not repeat tokens')
        if len(tokens) == len(RESERVED):
            raise ConfigError('A vocabulary needs at least one content token')
        self.tokens: tuple[str, ...] = tokens
        self._index = {token: index for index, token in enumerate(tokens)}

    @classmethod
    def synthetic(cls, n_content: int) -> Vocabulary:
        """Create the vocabulary of a synthetic corpus with ``n_content`` content tokens."""
        return cls([*RESERVED, *(f'w{index}' for index in range(n_content))])

    def __len__(self) -> int:
        """Return the vocabulary size ``V``."""
        return len(self.tokens)

    @property
    def content_ids(self) -> range:
        """Ids of the content tokens."""
        return range(len(RESERVED), len(self.tokens))

    def encode(self, words: Iterable[str]) -> list[int]:
        """Map tokens to ids.

        Raises:
            TokenIndexError:
                If a token is unknown.
        """
        try:
            return [self._index[word] for word in words]
        except KeyError as ex:
            raise TokenIndexError(f'Unknown token {ex.args[0]!r}') from ex

    def decode(self, ids: Iterable[int]) -> list[str]:
        """Map ids to tokens.

        Raises:
            TokenIndexError:
                If an id is out of range.
        """
        words = []
        for index in ids:
            if not 0 <= int(index) < len(self.tokens):
                raise TokenIndexError(f'Token id {index} out of range [0, {len(self.tokens)})')
            words.append(self.tokens[int(index)])
        return words

    def save(self, path: str | os.PathLike) -> None:
        """Write the vocabulary file (one token per line)."""
        with open(path, mode='wt', encoding='utf-8') as file:
            file.writelines(f'{token}\n' for token in self.tokens)

    @classmethod
    def load(cls, path: str | os.PathLike) -> Vocabulary:
        """Read a vocabulary file."""
        with open(path, encoding='utf-8') as file:
            return cls([line.strip() for line in file if line.strip()])
