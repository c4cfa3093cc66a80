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
"""Token error rates and decode-pathology measures."""

from __future__ import annotations

from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from lfad.api.vocab import strip_special


__all__ = [
    'WerRow',
    'WerReport',
    'PathologyReport',
    'edit_distance',
    'edit_counts',
    'wer',
    'repetition_score',
    'pathology_report',
    'bootstrap_interval',
    'format_table',
]


_OK, _SUB, _INS, _DEL = 0, 1, 2, 3


def _edit_table(
    reference: Sequence[int],
    hypothesis: Sequence[int],
) -> tuple[np.ndarray, np.ndarray]:
    n_ref, n_hyp = len(reference), len(hypothesis)
    costs = np.zeros((n_ref + 1, n_hyp + 1), dtype=np.int64)
    ops = np.zeros((n_ref + 1, n_hyp + 1), dtype=np.int8)
    costs[:, 0] = np.arange(n_ref + 1)
    costs[0, :] = np.arange(n_hyp + 1)
    ops[1:, 0] = _DEL
    ops[0, 1:] = _INS
    for i in range(1, n_ref + 1):
        for j in range(1, n_hyp + 1):
            if reference[i - 1] == hypothesis[j - 1]:
                costs[i, j] = costs[i - 1, j - 1]
                ops[i, j] = _OK
                continue
            substitution = costs[i - 1, j - 1] + 1
            insertion = costs[i, j - 1] + 1
            deletion = costs[i - 1, j] + 1
            costs[i, j] = min(substitution, insertion, deletion)
            if costs[i, j] == substitution:
                ops[i, j] = _SUB
            elif costs[i, j] == insertion:
                ops[i, j] = _INS
            else:
                ops[i, j] = _DEL
    return costs, ops


def edit_distance(reference: Sequence[int], hypothesis: Sequence[int]) -> int:
    """Return the Levenshtein distance with unit costs."""
    costs, _ = _edit_table(list(reference), list(hypothesis))
    return int(costs[-1, -1])


def edit_counts(reference: Sequence[int], hypothesis: Sequence[int]) -> tuple[int, int, int]:
    """Return the substitutions, insertions and deletions of one minimal alignment.

    Examples:
        >>> edit_counts([4, 5, 6], [4, 9, 6])
        (1, 0, 0)
    """
    reference, hypothesis = list(reference), list(hypothesis)
    _, ops = _edit_table(reference, hypothesis)
    substitutions = insertions = deletions = 0
    i, j = len(reference), len(hypothesis)
    while i > 0 or j > 0:
        op = ops[i, j]
        if op in (_OK, _SUB):
            substitutions += op == _SUB
            i, j = i - 1, j - 1
        elif op == _INS:
            insertions += 1
            j -= 1
        else:
            deletions += 1
            i -= 1
    return int(substitutions), insertions, deletions


@dataclass(frozen=True)
class WerRow:  # pylint: disable=too-many-instance-attributes
    """Alignment counts of one utterance (segmentation tokens and EOS stripped)."""

    reference: tuple[int, ...]
    hypothesis: tuple[int, ...]
    substitutions: int
    insertions: int
    deletions: int
    id: str = ''
    truncated: bool = False
    finished: bool = True

    @property
    def errors(self) -> int:
        """The edit distance ``S + I + D``."""
        return self.substitutions + self.insertions + self.deletions

    @property
    def wer(self) -> float:
        """The error rate ``(S + I + D) / N_ref``; an empty reference scores 0 or 1."""
        if not self.reference:
            return float(self.errors > 0)
        return self.errors / len(self.reference)


def wer(
    reference: Iterable[int],
    hypothesis: Iterable[int],
    id: str = '',  # pylint: disable=redefined-builtin
    truncated: bool = False,
    finished: bool = True,
) -> WerRow:
    """Align a hypothesis with its reference after stripping special tokens.

    Examples:
        >>> wer([4, 5, 6, 3, 2], [4, 9, 6, 2]).wer
        0.3333333333333333
    """
    reference, hypothesis = tuple(strip_special(reference)), tuple(strip_special(hypothesis))
    substitutions, insertions, deletions = edit_counts(reference, hypothesis)
    return WerRow(
        reference,
        hypothesis,
        substitutions,
        insertions,
        deletions,
        id,
        truncated,
        finished,
    )


def repetition_score(tokens: Sequence[int], max_order: int = 4) -> int:
    """Return the largest number of occurrences of any n-gram (``n <= max_order``) in ``tokens``.

    Examples:
        >>> repetition_score([4, 5, 4, 5, 4, 5])
        3
    """
    tokens = list(tokens)
    best = 0
    for order in range(1, max_order + 1):
        grams = Counter(tuple(tokens[i : i + order]) for i in range(len(tokens) - order + 1))
        if grams:
            best = max(best, max(grams.values()))
    return best


@dataclass
class WerReport:  # pylint: disable=too-many-instance-attributes
    """Corpus-level error counts over a list of :class:`WerRow` objects."""

    rows: list[WerRow] = field(default_factory=list)

    @property
    def substitutions(self) -> int:
        """Total substitutions."""
        return sum(row.substitutions for row in self.rows)

    @property
    def insertions(self) -> int:
        """Total insertions."""
        return sum(row.insertions for row in self.rows)

    @property
    def deletions(self) -> int:
        """Total deletions."""
        return sum(row.deletions for row in self.rows)

    @property
    def reference_length(self) -> int:
        """Total reference tokens ``N_ref``."""
        return sum(len(row.reference) for row in self.rows)

    @property
    def hypothesis_length(self) -> int:
        """Total hypothesis tokens."""
        return sum(len(row.hypothesis) for row in self.rows)

    def _ratio(self, count: int) -> float:
        total = self.reference_length
        if total == 0:
            return float(count > 0)
        return count / total

    @property
    def wer(self) -> float:
        """``(S + I + D) / N_ref``."""
        return self._ratio(self.substitutions + self.insertions + self.deletions)

    @property
    def insertion_ratio(self) -> float:
        """``I / N_ref``."""
        return self._ratio(self.insertions)

    @property
    def deletion_ratio(self) -> float:
        """``D / N_ref``."""
        return self._ratio(self.deletions)

    @property
    def length_ratio(self) -> float:
        """Hypothesis length over reference length."""
        return self._ratio(self.hypothesis_length)

    @property
    def truncation_rate(self) -> float:
        """Fraction of rows whose decode hit the token cap."""
        return float(np.mean([row.truncated for row in self.rows])) if self.rows else 0.0

    @property
    def eos_rate(self) -> float:
        """Fraction of rows whose decode ended with EOS."""
        return float(np.mean([row.finished for row in self.rows])) if self.rows else 0.0

    def summary(self) -> dict[str, Any]:
        """Return the aggregate numbers as a flat mapping."""
        return {
            'wer': self.wer,
            'substitutions': self.substitutions,
            'insertions': self.insertions,
            'deletions': self.deletions,
            'ref_len': self.reference_length,
            'ins_ratio': self.insertion_ratio,
            'del_ratio': self.deletion_ratio,
            'len_ratio': self.length_ratio,
            'trunc_rate': self.truncation_rate,
            'eos_rate': self.eos_rate,
            'utterances': len(self.rows),
        }


@dataclass(frozen=True)
class PathologyReport:
    """Aggregate decode-pathology rates."""

    truncation_rate: float
    eos_rate: float
    insertion_ratio: float
    deletion_ratio: float
    mean_repetition: float
    max_repetition: int

    def to_dict(self) -> dict[str, float]:
        """Return the rates as a mapping."""
        return asdict(self)


def pathology_report(rows: Sequence[WerRow]) -> PathologyReport:
    """Measure the failure signature of a decode run.

    ``mean_repetition`` averages :func:`repetition_score` over the hypotheses and
    ``max_repetition`` is its largest value.

    Examples:
        >>> pathology_report([wer([4, 5], [4, 5, 4, 5, 4, 5])]).insertion_ratio
        2.0
    """
    report = WerReport(list(rows))
    repetitions = [repetition_score(row.hypothesis) for row in rows] or [0]
    return PathologyReport(
        truncation_rate=report.truncation_rate,
        eos_rate=report.eos_rate,
        insertion_ratio=report.insertion_ratio,
        deletion_ratio=report.deletion_ratio,
        mean_repetition=float(np.mean(repetitions)),
        max_repetition=max(repetitions),
    )


def bootstrap_interval(
    rows: Sequence[WerRow],
    resamples: int = 1000,
    level: float = 0.95,
    seed: int = 0,
) -> tuple[float, float]:
    """Percentile bootstrap interval of the corpus error rate, resampling utterances."""
    if not rows:
        return 0.0, 0.0
    rng = np.random.default_rng(seed)
    errors = np.array([row.errors for row in rows], dtype=np.float64)
    lengths = np.array([len(row.reference) for row in rows], dtype=np.float64)
    picks = rng.integers(len(rows), size=(resamples, len(rows)))
    rates = errors[picks].sum(axis=1) / np.maximum(lengths[picks].sum(axis=1), 1.0)
    tail = (1.0 - level) / 2.0
    low, high = np.quantile(rates, [tail, 1.0 - tail])
    return float(low), float(high)


def _cell(value: Any) -> str:
    if isinstance(value, float):
        return f'{value:.4f}' if abs(value) < 10 else f'{value:.2f}'
    return str(value)


def format_table(rows: Sequence[Mapping[str, Any]], columns: Sequence[str] | None = None) -> str:
    """Render rows as an aligned text table; numbers are right-aligned.

    Examples:
        >>> print(format_table([{'model': 0, 'wer': 0.5}]))
        model  wer
        -----  ------
            0  0.5000
    """
    if not rows:
        return ''
    if columns is None:
        columns = list(rows[0])
    cells = [[_cell(row.get(column, '')) for column in columns] for row in rows]
    widths = [
        max(len(column), *(len(line[i]) for line in cells)) for i, column in enumerate(columns)
    ]
    numeric = [
        all(isinstance(row.get(column), (int, float)) for row in rows) for column in columns
    ]

    def render(values: Sequence[str], align: bool = True) -> str:
        parts = [
            value.rjust(width) if align and is_number else value.ljust(width)
            for value, width, is_number in zip(values, widths, numeric)
        ]
        return '  '.join(parts).rstrip()

    lines = [render(list(columns), align=False), render(['-' * width for width in widths])]
    lines.extend(render(line) for line in cells)
    return '\n'.join(lines)
