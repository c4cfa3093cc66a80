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
"""The core APIs of lfad."""

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
from lfad.api.collector import MetricCollector
from lfad.api.config import Config, CorpusConfig, CtcConfig, TrainConfig, load_config
from lfad.api.ctc import CtcHead, CtcOutput, ctc_greedy, ctc_loss, extract_segments
from lfad.api.datapipe import (
    Batch,
    SyntheticCorpusSpec,
    TrainingExample,
    generate_corpus,
    load_corpus,
    make_batches,
    save_corpus,
    simulated_vad,
    tag_semantic,
    transform_ac,
    transform_sc,
)
from lfad.api.decode import (
    DecodeConfig,
    Hypothesis,
    Transcript,
    attention_beam_decode,
    attention_rescore,
    cat_beam_decode,
    two_pass_decode,
)
from lfad.api.decoder import (
    Decoder,
    DecoderConfig,
    SegmentPE,
    aed_loss,
    cross_attention,
    inject_segment_pe,
)
from lfad.api.encoder import Encoder, EncoderConfig, EncodingSequence
from lfad.api.errors import (
    AlignmentError,
    ConfigError,
    ContractError,
    DimensionError,
    EmptyInputError,
    EmptyMemoryError,
    FrameIndexError,
    InfeasibleAlignmentError,
    LfadError,
    NumericalError,
    SegmentTooLongError,
    TokenIndexError,
    TooShortInputError,
    VersionError,
)
from lfad.api.harness import MODEL_FLAGS, AblationSpec, EvalMatrix, ablate, evaluate, train
from lfad.api.masking import (
    MaskSpec,
    build_layer_mask,
    context_profile,
    is_lfe,
    is_long_form_segment,
    required_window,
)
from lfad.api.metrics import WerReport, pathology_report, wer
from lfad.api.model import JointModel, load_checkpoint, save_checkpoint
from lfad.api.stream import AcousticStream, Segment
from lfad.api.utils import boolify, colored, set_color, timedelta2human
from lfad.api.vocab import BLANK, BOS, EOS, SEG_END, Vocabulary


__all__ = [
    # lfad.api.errors
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
    # lfad.api.stream
    'Segment',
    'AcousticStream',
    # lfad.api.vocab
    'BLANK',
    'BOS',
    'EOS',
    'SEG_END',
    'Vocabulary',
    # lfad.api.masking
    'MaskSpec',
    'build_layer_mask',
    'context_profile',
    'is_lfe',
    'is_long_form_segment',
    'required_window',
    # lfad.api.encoder
    'EncoderConfig',
    'EncodingSequence',
    'Encoder',
    # lfad.api.decoder
    'DecoderConfig',
    'SegmentPE',
    'Decoder',
    'inject_segment_pe',
    'cross_attention',
    'aed_loss',
    # lfad.api.ctc
    'CtcOutput',
    'CtcHead',
    'ctc_loss',
    'ctc_greedy',
    'extract_segments',
    # lfad.api.decode
    'DecodeConfig',
    'Hypothesis',
    'Transcript',
    'attention_beam_decode',
    'attention_rescore',
    'cat_beam_decode',
    'two_pass_decode',
    # lfad.api.datapipe
    'SyntheticCorpusSpec',
    'TrainingExample',
    'Batch',
    'generate_corpus',
    'save_corpus',
    'load_corpus',
    'transform_sc',
    'transform_ac',
    'tag_semantic',
    'simulated_vad',
    'make_batches',
    # lfad.api.metrics
    'WerReport',
    'wer',
    'pathology_report',
    # lfad.api.model
    'JointModel',
    'save_checkpoint',
    'load_checkpoint',
    # lfad.api.config
    'CorpusConfig',
    'CtcConfig',
    'TrainConfig',
    'Config',
    'load_config',
    # lfad.api.harness
    'MODEL_FLAGS',
    'AblationSpec',
    'EvalMatrix',
    'train',
    'evaluate',
    'ablate',
    # lfad.api.collector
    'MetricCollector',
    # lfad.api.utils
    'colored',
    'set_color',
    'boolify',
    'timedelta2human',
]
