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
"""Exception hierarchy of lfad APIs.

Every concrete error also derives from the closest builtin exception, so callers may catch either
:class:`LfadError` or, for example, :class:`ValueError`.
"""

from __future__ import annotations

from typing import Any


__all__ = [
    'LfadError',
    'DimensionError',
    'EmptyInputError',
    'ContractError',
    'TokenIndexError',
    'FrameIndexError',
    'ConfigError',
    'TooShortInputError',
    'AlignmentError',
    'SegmentTooLongError',
    'EmptyMemoryError',
    'InfeasibleAlignmentError',
    'VersionError',
    'NumericalError',
]


class LfadError(Exception):
    """Base exception class for all lfad errors."""


class DimensionError(LfadError, ValueError):
    """Raised when the shapes of the operands do not agree."""

    def __init__(self, message: str, *shapes: tuple[int, ...]) -> None:
        """Initialize the error with the offending shapes appended to the message."""
        self.shapes = shapes
        if shapes:
            message = '{} (shapes: {})'.format(message, ' vs. '.join(map(str, shapes)))
        super().__init__(message)


class EmptyInputError(LfadError, ValueError):
    """Raised when an operation receives an empty input where one is required."""


class ContractError(LfadError, ValueError):
    """Raised when a caller violates the documented pre-conditions of an operation."""


class TokenIndexError(LfadError, IndexError):
    """Raised when a token id is out of the vocabulary range."""


class FrameIndexError(LfadError, IndexError):
    """Raised when a frame index is out of the stream range."""


class ConfigError(LfadError, ValueError):
    """Raised for invalid or inconsistent configuration values."""


class TooShortInputError(LfadError, ValueError):
    """Raised when an acoustic stream is shorter than the decimation factor."""


class AlignmentError(LfadError, ValueError):
    """Raised when a streaming chunk is not aligned to the chunk grid."""


class SegmentTooLongError(LfadError, ValueError):
    """Raised when a segment is longer than the segment position table."""

    def __init__(self, length: int, max_length: int) -> None:
        """Initialize the error with the segment length and the table size."""
        self.length = length
        self.max_length = max_length
        super().__init__(
            f'Segment of {length} encoding frames exceeds '
            f'the position table size P_max={max_length}.',
        )


class EmptyMemoryError(LfadError, ValueError):
    """Raised when cross-attention is asked to attend over zero encodings."""


class InfeasibleAlignmentError(LfadError, ValueError):
    """Raised when a CTC target cannot be aligned to the available frames."""


class VersionError(LfadError, RuntimeError):
    """Raised when a checkpoint does not match the requested configuration."""


class NumericalError(LfadError, ArithmeticError):
    """Raised when training diverges (non-finite loss)."""

    def __init__(self, message: str, **diagnostics: Any) -> None:
        """Initialize the error with the diagnostics of the failing update."""
        self.diagnostics = diagnostics
        if diagnostics:
            details = ', '.join(f'{key}={value!r}' for key, value in diagnostics.items())
            message = f'{message} ({details})'
        super().__init__(message)
