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
"""Long-form attention decoding on a desk-scale speech model."""

import sys

from lfad import api
from lfad.api import *  # noqa: F403
from lfad.api import (
    collector,
    config,
    ctc,
    datapipe,
    decode,
    decoder,
    encoder,
    errors,
    harness,
    host,
    layers,
    masking,
    metrics,
    model,
    stream,
    tensor,
    utils,
    vocab,
)
from lfad.version import __version__


__all__ = [*api.__all__]

# Add submodules to the top-level namespace
for submodule in (
    collector,
    config,
    ctc,
    datapipe,
    decode,
    decoder,
    encoder,
    errors,
    harness,
    host,
    layers,
    masking,
    metrics,
    model,
    stream,
    tensor,
    utils,
    vocab,
):
    sys.modules[f'{__name__}.{submodule.__name__.rpartition(".")[-1]}'] = submodule

del sys
