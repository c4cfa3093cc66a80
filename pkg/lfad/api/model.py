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
"""The joint CTC/attention model, its training loss and ``.npz`` checkpoints."""

from __future__ import annotations

import copy
import json
import logging
import os
from typing import Any, NamedTuple

import numpy as np

from lfad.api.config import Config
from lfad.api.ctc import CtcHead, CtcOutput, ctc_loss
from lfad.api.datapipe import Batch
from lfad.api.decoder import Decoder
from lfad.api.encoder import Encoder
from lfad.api.errors import ContractError, DimensionError, VersionError
from lfad.api.layers import Module
from lfad.api.tensor import Tensor, concat, cross_entropy, no_grad, stack
from lfad.api.vocab import BOS, EOS
from lfad.version import __version__


__all__ = ['JointLoss', 'JointModel', 'save_checkpoint', 'load_checkpoint', 'read_header']


LOGGER = logging.getLogger(__name__)

HEADER_KEY = '__header__'


class JointLoss(NamedTuple):
    """The batch loss and its detached components (means over the examples)."""

    total: Tensor
    ctc: float
    aed: float
    accuracy: float


class JointModel(Module):
    """Encoder, CTC head and attention decoder sharing one set of encodings.

    All parameters are drawn from one generator seeded with ``config.encoder.seed``, so two models
    built from configurations with the same architecture and seed start from identical weights.
    """

    def __init__(self, config: Config) -> None:
        """Build the model described by ``config``."""
        self.config = config
        rng = np.random.default_rng(config.encoder.seed)
        self.encoder = Encoder(config.encoder, rng)
        self.ctc_head = CtcHead(config.encoder.d, config.encoder.vocab_size, rng)
        self.decoder = Decoder(config.decoder, config.encoder.vocab_size, rng)

    @property
    def vocab_size(self) -> int:
        """The number of output classes, reserved ids included."""
        return self.config.encoder.vocab_size

    # pylint: disable-next=too-many-locals
    def loss(self, batch: Batch) -> JointLoss:
        """Joint loss ``mean_i(lambda * ctc_i + (1 - lambda) * aed_i)`` of a padded batch.

        Example ``i`` is scored on its valid encoding window ``batch.valid[i]`` only: the CTC
        lattice and the decoder memory are both sliced to it, and the segment codes restart at
        the first valid frame. Padding never changes the loss of an example.
        """
        weight = self.config.ctc.weight
        ss_in_aed = self.config.ctc.ss_in_aed
        encodings = self.encoder(
            batch.features,
            batch.frame_counts,
            batch.offsets,
            batch.chunk_size,
        )
        log_probs = self.ctc_head(encodings)

        ctc_terms: list[Tensor] = []
        memories: list[Tensor] = []
        targets: list[list[int]] = []
        for row, (start, stop) in enumerate(batch.valid.tolist()):
            example = batch.examples[row]
            lattice = CtcOutput(log_probs[row, start:stop])
            ctc_terms.append(ctc_loss(lattice, example.ctc_targets()))
            memories.append(self.decoder.prepare_memory(encodings[row, start:stop]))
            targets.append(example.aed_targets(ss_in_aed))

        longest = max(memory.shape[0] for memory in memories)
        width = self.config.decoder.d
        padded = [
            concat([memory, np.zeros((longest - memory.shape[0], width))])
            if memory.shape[0] < longest
            else memory
            for memory in memories
        ]
        memory_mask = np.zeros((len(memories), longest), dtype=bool)
        for row, memory in enumerate(memories):
            memory_mask[row, : memory.shape[0]] = True

        length = max(map(len, targets))
        inputs = np.full((len(targets), length), EOS, dtype=np.int64)
        for row, target in enumerate(targets):
            inputs[row, : len(target)] = [BOS, *target[:-1]]
        logits = self.decoder(stack(padded), inputs, memory_mask)

        terms: list[Tensor] = []
        aed_values: list[float] = []
        hits = total = 0
        for row, target in enumerate(targets):
            row_logits = logits[row, : len(target)]
            aed = cross_entropy(row_logits, target)
            aed_values.append(aed.item())
            hits += int((row_logits.data.argmax(axis=-1) == np.asarray(target)).sum())
            total += len(target)
            terms.append(ctc_terms[row] * weight + aed * (1.0 - weight))

        return JointLoss(
            total=stack(terms).mean(),
            ctc=float(np.mean([term.item() for term in ctc_terms])),
            aed=float(np.mean(aed_values)),
            accuracy=hits / max(total, 1),
        )

    def evaluate_loss(self, batch: Batch) -> JointLoss:
        """Compute :meth:`loss` without recording the graph."""
        with no_grad():
            return self.loss(batch)

    def snapshot(self) -> JointModel:
        """Return a copy whose parameter arrays are flagged read-only, for concurrent decoding."""
        clone = copy.deepcopy(self)
        for param in clone.parameters():
            param.data = param.data.copy()
            param.data.setflags(write=False)
            param.grad = None
        clone.encoder.forward_calls = 0
        return clone


# Checkpoints ######################################################################################


def save_checkpoint(
    model: JointModel,
    path: str | os.PathLike,
    updates: int = 0,
    **extra: Any,
) -> str:
    """Write the parameters and a JSON header (configuration, hashes, version) to an ``.npz`` file.

    Returns:
        The path written.
    """
    config = model.config
    header = {
        'version': __version__,
        'config': config.to_flat(),
        'architecture_hash': config.architecture_hash(),
        'config_hash': config.hash(),
        'seed': config.train.seed,
        'updates': updates,
        **extra,
    }
    path = os.fspath(path)
    with open(path, mode='wb') as file:
        np.savez(file, **{HEADER_KEY: np.array(json.dumps(header))}, **model.state_dict())
    LOGGER.info('Saved checkpoint %r after %d updates.', path, updates)
    return path


def read_header(path: str | os.PathLike) -> dict[str, Any]:
    """Return the JSON header of a checkpoint.

    Raises:
        VersionError:
            If the file is not a checkpoint.
    """
    try:
        with np.load(os.fspath(path), allow_pickle=False) as archive:
            if HEADER_KEY not in archive.files:
                raise VersionError(f'{os.fspath(path)!r} has no checkpoint header')
            return json.loads(str(archive[HEADER_KEY]))
    except (OSError, ValueError) as ex:
        raise VersionError(f'Cannot read checkpoint {os.fspath(path)!r}: {ex}') from ex


def load_checkpoint(
    path: str | os.PathLike,
    expected_hash: str | None = None,
) -> tuple[JointModel, dict[str, Any]]:
    """Rebuild a model from a checkpoint and return it with the header.

    Args:
        path: The ``.npz`` file written by :func:`save_checkpoint`.
        expected_hash: The architecture hash the caller requires, if any.

    Raises:
        VersionError:
            If the stored architecture hash does not match the stored configuration or
            ``expected_hash``, or if the stored parameters do not fit the architecture.
    """
    header = read_header(path)
    config = Config.from_mapping(header['config'])
    stored = header.get('architecture_hash')
    if stored != config.architecture_hash():
        raise VersionError(
            f'Checkpoint {os.fspath(path)!r} is corrupt: its hash does not match its configuration',
        )
    if expected_hash is not None and stored != expected_hash:
        raise VersionError(
            f'Checkpoint {os.fspath(path)!r} has architecture {stored[:12]}, '
            f'expected {expected_hash[:12]}',
        )
    model = JointModel(config)
    with np.load(os.fspath(path), allow_pickle=False) as archive:
        state = {name: archive[name] for name in archive.files if name != HEADER_KEY}
    try:
        model.load_state_dict(state)
    except (ContractError, DimensionError) as ex:
        raise VersionError(
            f'Checkpoint {os.fspath(path)!r} does not fit its architecture: {ex}',
        ) from ex
    return model, header
