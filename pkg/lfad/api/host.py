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
"""Shortcuts for package ``psutil``: resource usage of the host and of the current process."""

from __future__ import annotations

import os as _os

import psutil as _psutil


__all__ = [
    'PsutilError',
    'memory_percent',
    'current_process',
    'resource_metrics',
]


PsutilError = _psutil.Error
MiB = 1 << 20

_PROCESS: _psutil.Process | None = None


def memory_percent() -> float:
    """The percentage usage of virtual memory, ``(total - available) / total * 100``."""
    return _psutil.virtual_memory().percent


def current_process() -> _psutil.Process:
    """Return the (cached) process handle of this interpreter."""
    global _PROCESS  # pylint: disable=global-statement
    if _PROCESS is None or _PROCESS.pid != _os.getpid():
        _PROCESS = _psutil.Process(_os.getpid())
        _PROCESS.cpu_percent()  # the first call only primes the counter
    return _PROCESS


def resource_metrics() -> dict[str, float]:
    """Sample host and process resource usage.

    The keys follow the ``<scope>/<metric (unit)>`` naming of
    :class:`lfad.api.collector.MetricCollector`.
    Missing permissions yield an empty mapping.

    Examples:
        >>> resource_metrics()
        {
            'host/cpu_percent (%)': 8.9,
            'host/memory_percent (%)': 21.5,
            'process/cpu_percent (%)': 99.7,
            'process/rss (MiB)': 153.4,
        }
    """
    try:
        process = current_process()
        with process.oneshot():
            rss = process.memory_info().rss
            process_cpu = process.cpu_percent()
        return {
            'host/cpu_percent (%)': _psutil.cpu_percent(),
            'host/memory_percent (%)': memory_percent(),
            'process/cpu_percent (%)': process_cpu,
            'process/rss (MiB)': rss / MiB,
        }
    except PsutilError:
        return {}
