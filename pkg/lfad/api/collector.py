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
"""Tagged metric collection for training and evaluation loops."""

from __future__ import annotations

import contextlib
import math
import threading
import time
from collections import defaultdict
from timeit import default_timer as timer
from typing import Generator, Iterable, Mapping

from lfad.api import host


__all__ = ['MetricCollector']


class MetricCollector:
    """A class for collecting scalar metrics under nested tags.

    Values are pushed with :meth:`add`; :meth:`collect` reports the mean, min, max and last value of
    every key since the active tag was started (or cleared), along with the duration of the tag.
    With ``sample_resources=True`` every :meth:`add` also records a host resource sample.

    Core methods:

    .. code-block:: python

        collector.activate(tag='<tag>')  # alias: start
        collector.deactivate()           # alias: stop
        collector.clear(tag='<tag>')
        collector.add({'loss': 1.0})
        collector.collect()

        with collector(tag='<tag>'):
            ...

    Examples:
        >>> collector = MetricCollector()
        >>> with collector(tag='train'):
        ...     with collector(tag='batch'):
        ...         collector.add({'loss': 2.0})
        ...         collector.add({'loss': 1.0})
        ...         collector.collect()  # -> Dict[str, float]
        # key -> '<tag>/<metric>/<mean/min/max/last>'
        {
            'train/batch/loss/mean': 1.5,
            'train/batch/loss/min': 1.0,
            'train/batch/loss/max': 2.0,
            'train/batch/loss/last': 1.0,
            'train/batch/duration (s)': 0.0001,
            'train/batch/timestamp': 1718000000.0
        }
    """

    def __init__(self, sample_resources: bool = False) -> None:
        """Initialize the metric collector."""
        self.sample_resources: bool = sample_resources
        self._lock: threading.RLock = threading.RLock()
        self._metric_buffer: _MetricBuffer | None = None
        self._tags: set[str] = set()

    @property
    def tag(self) -> str | None:
        """The key prefix of the active collection."""
        with self._lock:
            return None if self._metric_buffer is None else self._metric_buffer.key_prefix

    def activate(self, tag: str) -> MetricCollector:
        """Start a new metric collection with the given tag, nested in the active one.

        Raises:
            RuntimeError:
                If a collection with the same tag is already active.

        Examples:
            >>> collector = MetricCollector()

            >>> collector.activate(tag='train')  # key prefix -> 'train'
            >>> collector.activate(tag='batch')  # key prefix -> 'train/batch'
            >>> collector.deactivate()           # key prefix -> 'train'
            >>> collector.deactivate()           # the collector has been stopped
            >>> collector.activate(tag='test')   # key prefix -> 'test'
        """
        with self._lock:
            if self._metric_buffer is None or tag not in self._tags:
                self._tags.add(tag)
                self._metric_buffer = _MetricBuffer(tag, prev=self._metric_buffer)
            else:
                raise RuntimeError(f'Metric collector is already started with tag "{tag}"')
        return self

    start = activate

    def deactivate(self, tag: str | None = None) -> MetricCollector:
        """Stop the collection with the given tag (default: the active one) and all its sub-tags."""
        with self._lock:
            if self._metric_buffer is None:
                if tag is not None:
                    raise RuntimeError('Metric collector has not been started yet.')
                return self

            if tag is None:
                tag = self._metric_buffer.tag
            elif tag not in self._tags:
                raise RuntimeError(f'Metric collector has not been started with tag "{tag}".')

            buffer = self._metric_buffer
            while True:
                self._tags.remove(buffer.tag)
                if buffer.tag == tag:
                    self._metric_buffer = buffer.prev
                    break
                buffer = buffer.prev  # type: ignore[assignment]
        return self

    stop = deactivate

    @contextlib.contextmanager
    def context(self, tag: str) -> Generator[MetricCollector, None, None]:
        """A context manager for starting and stopping a metric collection."""
        try:
            self.activate(tag=tag)
            yield self
        finally:
            self.deactivate(tag=tag)

    __call__ = context  # alias for `with collector(tag='<tag>')`

    def clear(self, tag: str | None = None) -> None:
        """Reset the collection with the given tag (default: the active one) and its sub-tags."""
        with self._lock:
            if self._metric_buffer is None:
                if tag is not None:
                    raise RuntimeError('Metric collector has not been started yet.')
                return

            if tag is None:
                tag = self._metric_buffer.tag
            elif tag not in self._tags:
                raise RuntimeError(f'Metric collector has not been started with tag "{tag}".')

            buffer = self._metric_buffer
            while True:
                buffer.clear()
                if buffer.tag == tag:
                    break
                buffer = buffer.prev  # type: ignore[assignment]

    def add(self, metrics: Mapping[str, float]) -> None:
        """Record one value per key in the active collection and all enclosing ones."""
        with self._lock:
            if self._metric_buffer is None:
                raise RuntimeError('Metric collector has not been started yet.')
            values = dict(metrics)
            if self.sample_resources:
                values.update(host.resource_metrics())
            self._metric_buffer.add(values)

    def collect(self) -> dict[str, float]:
        """Get the statistics of the active collection."""
        with self._lock:
            if self._metric_buffer is None:
                raise RuntimeError('Metric collector has not been started yet.')
            return self._metric_buffer.collect()


class _MetricBuffer:  # pylint: disable=missing-class-docstring,missing-function-docstring
    def __init__(self, tag: str, prev: _MetricBuffer | None = None) -> None:
        self.prev: _MetricBuffer | None = prev

        self.tag: str = tag
        self.key_prefix: str
        if self.prev is not None:
            self.key_prefix = f'{self.prev.key_prefix}/{self.tag}'
        else:
            self.key_prefix = self.tag

        self.start_timestamp = timer()
        self.buffer: defaultdict[str, _StatisticsMaintainer] = defaultdict(_StatisticsMaintainer)
        self.len = 0

    def add(self, metrics: dict[str, float]) -> None:
        for key, value in metrics.items():
            self.buffer[key].add(float(value))
        self.len += 1

        if self.prev is not None:
            self.prev.add(metrics)

    def clear(self) -> None:
        self.start_timestamp = timer()
        self.buffer.clear()
        self.len = 0

    def collect(self) -> dict[str, float]:
        metrics = {
            f'{self.key_prefix}/{key}/{name}': value
            for key, stats in self.buffer.items()
            for name, value in stats.items()
        }
        metrics[f'{self.key_prefix}/duration (s)'] = timer() - self.start_timestamp
        metrics[f'{self.key_prefix}/timestamp'] = time.time()
        return metrics

    def __len__(self) -> int:
        return self.len


class _StatisticsMaintainer:  # pylint: disable=missing-class-docstring,missing-function-docstring
    def __init__(self) -> None:
        self.total: float = 0.0
        self.count: int = 0
        self.last_value: float | None = None
        self.min_value: float | None = None
        self.max_value: float | None = None

    def add(self, value: float) -> None:
        if math.isnan(value):
            return

        if self.last_value is None:
            self.min_value = self.max_value = value
        else:
            self.min_value = min(self.min_value, value)  # type: ignore[type-var]
            self.max_value = max(self.max_value, value)  # type: ignore[type-var]
        self.last_value = value
        self.total += value
        self.count += 1

    def mean(self) -> float:
        if self.count == 0:
            return math.nan
        return self.total / self.count

    def min(self) -> float:
        if self.min_value is None:
            return math.nan
        return self.min_value

    def max(self) -> float:
        if self.max_value is None:
            return math.nan
        return self.max_value

    def last(self) -> float:
        if self.last_value is None:
            return math.nan
        return self.last_value

    def items(self) -> Iterable[tuple[str, float]]:
        yield ('mean', self.mean())
        yield ('min', self.min())
        yield ('max', self.max())
        yield ('last', self.last())
