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
"""Shared fixtures: a deterministic generator and a model small enough to train in seconds."""

from __future__ import annotations

import numpy as np
import pytest

from lfad.api.config import Config
from lfad.api.datapipe import generate_corpus
from lfad.api.model import JointModel


TINY_CONFIG = """
corpus.sentences = 1, 2
corpus.words = 2, 3
corpus.noise = 0.05
encoder.L = 2
encoder.N = 2
encoder.M_list = 2, 4
encoder.R = 2
encoder.d = 16
encoder.heads = 2
encoder.ff = 32
decoder.blocks = 1
decoder.d = 16
decoder.heads = 2
decoder.ff = 32
decoder.p_max = 64
train.updates = 3
train.batch = 4
train.warmup = 1
train.n_train = 4
train.n_val = 2
train.max_duration = 40
train.log_every = 1
train.val_every = 2
decode.beam = 2
decode.nbest = 2
"""


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config() -> Config:
    return Config.from_text(TINY_CONFIG)


@pytest.fixture
def tiny_model(tiny_config: Config) -> JointModel:
    return JointModel(tiny_config)


@pytest.fixture
def tiny_corpus(tiny_config: Config) -> list:
    return generate_corpus(tiny_config.corpus, n_recordings=3, decimation=tiny_config.encoder.R)
