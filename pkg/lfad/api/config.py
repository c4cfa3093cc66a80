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
"""Run configuration: typed sections, flat ``section.key = value`` or JSON text, and hashes.

Examples:
    A flat configuration file::

        # toy model, semantic segmentation
        encoder.M_list = 2, 8
        decoder.pe_enabled = yes
        train.updates = 300
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from typing import Any, ClassVar, Mapping

from lfad.api.datapipe import AC_FILLS, SyntheticCorpusSpec
from lfad.api.decode import DecodeConfig
from lfad.api.decoder import DecoderConfig
from lfad.api.encoder import EncoderConfig
from lfad.api.errors import ConfigError
from lfad.api.utils import boolify


__all__ = ['CorpusConfig', 'CtcConfig', 'TrainConfig', 'Config', 'load_config']


NULLS = frozenset({'', 'none', 'null'})


CorpusConfig = SyntheticCorpusSpec


@dataclasses.dataclass(frozen=True)
class CtcConfig:
    """Joint-loss weight of the CTC head and the target policy of segmentation tokens."""

    weight: float = 0.3
    ss_in_aed: bool = True

    def __post_init__(self) -> None:
        """Validate the weight."""
        if not 0.0 <= self.weight <= 1.0:
            raise ConfigError(f'ctc.weight must lie in [0, 1], got {self.weight}')


@dataclasses.dataclass(frozen=True)
class TrainConfig:  # pylint: disable=too-many-instance-attributes
    """Training budget, optimizer and data transforms.

    ``max_duration`` is counted in encoding frames.
    """

    updates: int = 3000
    batch: int = 16
    lr: float = 3e-3
    warmup: int = 100
    beta1: float = 0.9
    beta2: float = 0.999
    clip: float = 1.0
    n_train: int = 200
    n_val: int = 20
    max_duration: int = 75
    max_segments: int | None = None
    sc: bool = True
    ac: bool = True
    ss: bool = True
    ac_p_apply: float = 0.5
    ac_fill: str = 'audio'
    log_every: int = 50
    val_every: int = 500
    seed: int = 0

    def __post_init__(self) -> None:
        """Validate the budget."""
        if self.updates < 0 or self.batch < 1 or self.warmup < 0:
            raise ConfigError(
                'train.updates, train.batch and train.warmup must be non-negative (batch >= 1)',
            )
        if self.lr <= 0.0:
            raise ConfigError(f'train.lr must be positive, got {self.lr}')
        if self.n_train < 1 or self.n_val < 0:
            raise ConfigError('train.n_train must be positive and train.n_val non-negative')
        if self.max_duration < 1:
            raise ConfigError(f'train.max_duration must be positive, got {self.max_duration}')
        if not 0.0 <= self.ac_p_apply <= 1.0:
            raise ConfigError(f'train.ac_p_apply must lie in [0, 1], got {self.ac_p_apply}')
        if self.ac_fill not in AC_FILLS:
            raise ConfigError(f'Unknown train.ac_fill {self.ac_fill!r}, expected one of {AC_FILLS}')


def _convert(annotation: str, raw: Any) -> Any:  # pylint: disable=too-many-return-statements
    optional = annotation.endswith('| None')
    if optional and (raw is None or (isinstance(raw, str) and raw.strip().lower() in NULLS)):
        return None
    base = annotation.replace('| None', '').strip()
    if base.startswith('tuple'):
        if isinstance(raw, str):
            raw = raw.replace('(', '').replace(')', '')
            raw = [item for item in raw.split(',') if item.strip()]
        return tuple(int(item) for item in raw)
    if base == 'bool':
        return boolify(raw) if isinstance(raw, (str, bool)) else bool(raw)
    if base == 'int':
        if isinstance(raw, float) and not raw.is_integer():
            raise ValueError(f'{raw!r} is not an integer')
        return int(raw)
    if base == 'float':
        return float(raw)
    return str(raw).strip()


@dataclasses.dataclass(frozen=True)
class Config:
    """All sections of a run configuration."""

    SECTIONS: ClassVar[tuple[str, ...]] = ('corpus', 'encoder', 'decoder', 'ctc', 'train', 'decode')

    corpus: CorpusConfig = dataclasses.field(default_factory=CorpusConfig)
    encoder: EncoderConfig = dataclasses.field(default_factory=EncoderConfig)
    decoder: DecoderConfig = dataclasses.field(default_factory=DecoderConfig)
    ctc: CtcConfig = dataclasses.field(default_factory=CtcConfig)
    train: TrainConfig = dataclasses.field(default_factory=TrainConfig)
    decode: DecodeConfig = dataclasses.field(default_factory=DecodeConfig)

    def __post_init__(self) -> None:
        """Check the agreement between sections."""
        if self.decoder.d != self.encoder.d:
            raise ConfigError(f'decoder.d={self.decoder.d} must equal encoder.d={self.encoder.d}')
        if self.corpus.vocab_size != self.encoder.vocab_size:
            raise ConfigError(
                f'corpus.vocab_size={self.corpus.vocab_size} must equal '
                f'encoder.vocab_size={self.encoder.vocab_size}',
            )
        if self.corpus.feature_dim != self.encoder.feature_dim:
            raise ConfigError(
                f'corpus.feature_dim={self.corpus.feature_dim} must equal '
                f'encoder.feature_dim={self.encoder.feature_dim}',
            )

    @classmethod
    def from_mapping(cls, values: Mapping[str, Any], base: Config | None = None) -> Config:
        """Build a configuration from ``{'section.key': value}`` entries on top of ``base``.

        Raises:
            ConfigError:
                If a key is unknown or a value cannot be converted.
        """
        base = cls() if base is None else base
        updates: dict[str, dict[str, Any]] = {section: {} for section in cls.SECTIONS}
        for dotted, raw in values.items():
            section, _, key = dotted.strip().partition('.')
            if section not in updates or not key:
                raise ConfigError(f'Unknown configuration key {dotted!r}')
            fields = {field.name: field for field in dataclasses.fields(getattr(base, section))}
            if key not in fields:
                raise ConfigError(f'Unknown configuration key {dotted!r}')
            try:
                updates[section][key] = _convert(str(fields[key].type), raw)
            except (TypeError, ValueError) as ex:
                raise ConfigError(f'Invalid value {raw!r} for {dotted!r}: {ex}') from ex
        sections = {
            section: dataclasses.replace(getattr(base, section), **changes)
            for section, changes in updates.items()
            if changes
        }
        return dataclasses.replace(base, **sections)

    @classmethod
    def from_text(cls, text: str, base: Config | None = None) -> Config:
        """Parse flat ``section.key = value`` lines (``#`` starts a comment) or a JSON document.

        Raises:
            ConfigError:
                If the text is malformed or holds unknown keys.
        """
        stripped = text.strip()
        if stripped.startswith('{'):
            try:
                document = json.loads(stripped)
            except json.JSONDecodeError as ex:
                raise ConfigError(f'Malformed JSON configuration: {ex}') from ex
            values: dict[str, Any] = {}
            for section, entries in document.items():
                if not isinstance(entries, dict):
                    raise ConfigError(f'Section {section!r} must be an object')
                values.update({f'{section}.{key}': value for key, value in entries.items()})
            return cls.from_mapping(values, base)

        values = {}
        for number, line in enumerate(text.splitlines(), start=1):
            line = line.split('#', 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition('=')
            if not sep:
                raise ConfigError(f'Line {number}: expected "section.key = value", got {line!r}')
            values[key.strip()] = value.strip()
        return cls.from_mapping(values, base)

    def with_seed(self, seed: int) -> Config:
        """Return a copy with every seed replaced by ``seed``."""
        return Config(
            corpus=dataclasses.replace(self.corpus, seed=seed),
            encoder=dataclasses.replace(self.encoder, seed=seed),
            decoder=self.decoder,
            ctc=self.ctc,
            train=dataclasses.replace(self.train, seed=seed),
            decode=dataclasses.replace(self.decode, vad_seed=seed),
        )

    def to_dict(self) -> dict[str, dict[str, Any]]:
        """Return the nested ``{section: {key: value}}`` mapping."""
        return {section: dataclasses.asdict(getattr(self, section)) for section in self.SECTIONS}

    def to_flat(self) -> dict[str, Any]:
        """Return the flat ``{'section.key': value}`` mapping."""
        return {
            f'{section}.{key}': value
            for section, entries in self.to_dict().items()
            for key, value in entries.items()
        }

    def to_text(self) -> str:
        """Render the configuration as flat text that :meth:`from_text` parses back."""

        def render(value: Any) -> str:
            if isinstance(value, (tuple, list)):
                return ', '.join(map(str, value))
            if value is None:
                return 'none'
            return str(value)

        return ''.join(f'{key} = {render(value)}\n' for key, value in self.to_flat().items())

    def architecture_hash(self) -> str:
        """SHA-256 of the keys that shape the parameters (encoder, decoder, vocabulary size)."""
        encoder = dataclasses.asdict(self.encoder)
        encoder.pop('seed')
        document = {'encoder': encoder, 'decoder': dataclasses.asdict(self.decoder)}
        return hashlib.sha256(json.dumps(document, sort_keys=True).encode('utf-8')).hexdigest()

    def hash(self) -> str:
        """SHA-256 of the whole configuration."""
        document = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(document.encode('utf-8')).hexdigest()


def load_config(
    path: str | os.PathLike | None = None,
    overrides: Mapping[str, Any] | None = None,
) -> Config:
    """Read a configuration file (or the defaults) and apply ``{'section.key': value}`` overrides.

    Raises:
        ConfigError:
            If the file cannot be read or is invalid.
    """
    config = Config()
    if path is not None:
        try:
            with open(path, encoding='utf-8') as file:
                text = file.read()
        except OSError as ex:
            raise ConfigError(
                f'Cannot read configuration {os.fspath(path)!r}: {ex.strerror}',
            ) from ex
        config = Config.from_text(text)
    if overrides:
        config = Config.from_mapping(overrides, base=config)
    return config
