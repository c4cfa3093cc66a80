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
"""Experiment orchestration: training, the evaluation matrix and the transform ablation grid.

The ablation grid trains one model per flag set and seed:

    ======  ====  ====  ====  ====
    model    SC    AC    PE    SS
    ======  ====  ====  ====  ====
    0
    1        x
    2        x     x
    3        x           x
    4        x     x     x
    5        x     x     x     x
    ======  ====  ====  ====  ====
"""

from __future__ import annotations

import dataclasses
import datetime
import hashlib
import itertools
import json
import logging
import math
import os
import statistics
import time
from concurrent.futures import ProcessPoolExecutor, ThreadPoolExecutor
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from lfad.api.collector import MetricCollector
from lfad.api.config import Config
from lfad.api.datapipe import (
    Batch,
    TrainingExample,
    generate_corpus,
    make_batches,
    segment_example,
    transform_ac,
    transform_sc,
)
from lfad.api.decode import (
    ENCODINGS,
    MODES,
    SEGMENTATIONS,
    DecodeConfig,
    Transcript,
    two_pass_decode,
)
from lfad.api.errors import ConfigError, EmptyInputError, NumericalError
from lfad.api.masking import MaskSpec, build_layer_mask, chunk_bounds, context_profile
from lfad.api.metrics import WerReport, format_table, pathology_report, wer
from lfad.api.model import JointModel, load_checkpoint, save_checkpoint
from lfad.api.stream import AcousticStream
from lfad.api.tensor import AdamState, adam_step, backward, clip_grad_norm


__all__ = [
    'FLAGS',
    'CORPUS_SPLITS',
    'MODEL_FLAGS',
    'apply_flags',
    'model_flags',
    'corpus_split',
    'make_run_dir',
    'ExampleSampler',
    'TrainResult',
    'validation_batches',
    'learning_rate',
    'train',
    'EvalMatrix',
    'EvalCell',
    'evaluate',
    'AblationSpec',
    'AblationReport',
    'ablate',
    'inspect_mask',
    'render_mask',
]


LOGGER = logging.getLogger(__name__)

FLAGS = ('SC', 'AC', 'PE', 'SS')
MODEL_FLAGS: dict[int, frozenset[str]] = {
    0: frozenset(),
    1: frozenset({'SC'}),
    2: frozenset({'SC', 'AC'}),
    3: frozenset({'SC', 'PE'}),
    4: frozenset({'SC', 'AC', 'PE'}),
    5: frozenset({'SC', 'AC', 'PE', 'SS'}),
}

CORPUS_SPLITS = ('train', 'val', 'test')


def apply_flags(config: Config, flags: Iterable[str]) -> Config:
    """Return ``config`` with the transform and segment-code switches set to exactly ``flags``.

    Raises:
        ConfigError:
            If a flag is unknown.
    """
    flags = frozenset(flags)
    unknown = sorted(flags.difference(FLAGS))
    if unknown:
        raise ConfigError(f'Unknown flags {unknown}, expected a subset of {FLAGS}')
    return dataclasses.replace(
        config,
        decoder=dataclasses.replace(config.decoder, pe_enabled='PE' in flags),
        train=dataclasses.replace(
            config.train,
            sc='SC' in flags,
            ac='AC' in flags,
            ss='SS' in flags,
        ),
    )


def model_flags(config: Config) -> frozenset[str]:
    """Return the flags a configuration trains with."""
    enabled = {
        'SC': config.train.sc,
        'AC': config.train.ac,
        'PE': config.decoder.pe_enabled,
        'SS': config.train.ss,
    }
    return frozenset(flag for flag, on in enabled.items() if on)


def corpus_split(
    config: Config,
    split: str,
    n_recordings: int | None = None,
) -> list[AcousticStream]:
    """Generate the ``train``, ``val`` or ``test`` recordings of a configuration.

    The splits are drawn from the same corpus specification with the seeds ``seed``, ``seed + 1``
    and ``seed + 2``.
    """
    if split not in CORPUS_SPLITS:
        raise ConfigError(f'Unknown corpus split {split!r}, expected one of {CORPUS_SPLITS}')
    if n_recordings is None:
        n_recordings = config.train.n_val if split == 'val' else config.train.n_train
    spec = dataclasses.replace(config.corpus, seed=config.corpus.seed + CORPUS_SPLITS.index(split))
    return generate_corpus(spec, n_recordings, config.encoder.R)


def make_run_dir(
    run_dir: str | os.PathLike | None,
    command: str,
    config: Config | None = None,
) -> str:
    """Create the run directory (default ``runs/<command>-<stamp>``) and store the configuration."""
    if run_dir is None:
        stamp = datetime.datetime.now().strftime('%Y%m%d-%H%M%S')
        run_dir = os.path.join('runs', f'{command}-{stamp}')
    run_dir = os.fspath(run_dir)
    os.makedirs(run_dir, exist_ok=True)
    if config is not None:
        with open(os.path.join(run_dir, 'config.cfg'), mode='w', encoding='utf-8') as file:
            file.write(config.to_text())
    return run_dir


def _append_jsonl(path: str, record: Mapping[str, Any]) -> None:
    with open(path, mode='a', encoding='utf-8') as file:
        file.write(json.dumps(record, sort_keys=True) + '\n')


# Training #########################################################################################


class ExampleSampler:
    """Draw transformed training batches online from a corpus.

    Recording selection, transforms and chunk sizes use three independent streams spawned from
    ``train.seed``, so the recordings chosen for every batch depend on the seed only and not on
    which transforms are enabled.
    """

    def __init__(self, corpus: Sequence[AcousticStream], config: Config) -> None:
        """Bind the sampler to a corpus and a configuration.

        Raises:
            EmptyInputError:
                If no recording of the corpus has reference segments.
        """
        self.corpus = [stream for stream in corpus if stream.segments]
        if not self.corpus:
            raise EmptyInputError('The training corpus holds no segmented recording')
        self.config = config
        select, transform, chunks = np.random.SeedSequence(config.train.seed).spawn(3)
        self.select_rng = np.random.default_rng(select)
        self.transform_rng = np.random.default_rng(transform)
        self.chunk_rng = np.random.default_rng(chunks)
        self.ac_spec = config.encoder.mask_spec(max(config.encoder.M_list))

    def example(self, recording: AcousticStream) -> TrainingExample:
        """Build one training example from ``recording`` with the configured transforms."""
        train, R = self.config.train, self.config.encoder.R  # noqa: N806
        if train.sc:
            example = transform_sc(
                recording,
                train.max_duration,
                self.transform_rng,
                R,
                ss=train.ss,
                max_segments=train.max_segments,
            )
        else:
            n_segments = len(recording.segments)  # type: ignore[arg-type]
            index = int(self.transform_rng.integers(n_segments))
            example = segment_example(recording, index, R, ss=train.ss)
        if train.ac:
            example = transform_ac(
                example,
                recording,
                self.ac_spec,
                train.ac_p_apply,
                self.transform_rng,
                fill=train.ac_fill,
                silence_level=self.config.corpus.silence_level,
            )
        return example

    def next_batch(self) -> tuple[Batch, str]:
        """Return the next batch and the digest of the recordings it was drawn from."""
        indices = self.select_rng.integers(len(self.corpus), size=self.config.train.batch)
        examples = [self.example(self.corpus[index]) for index in indices]
        encoder = self.config.encoder
        batch = next(
            make_batches(examples, len(examples), encoder.M_list, self.chunk_rng, encoder.R),
        )
        selection = hashlib.sha256(np.asarray(indices, dtype=np.int64).tobytes()).hexdigest()[:16]
        return batch, selection


def validation_batches(corpus: Sequence[AcousticStream], config: Config) -> list[Batch]:
    """Fixed validation batches: every reference segment on its own, at the default chunk size."""
    R = config.encoder.R  # noqa: N806
    examples = [
        segment_example(stream, index, R, ss=config.train.ss)
        for stream in corpus
        for index in range(len(stream.segments or ()))
    ]
    if not examples:
        return []
    rng = np.random.default_rng(config.train.seed)
    return list(make_batches(examples, config.train.batch, config.encoder.M_list[:1], rng, R))


def learning_rate(config: Config, update: int) -> float:
    """Linear warm-up to ``train.lr`` over ``train.warmup`` updates, constant afterwards."""
    train = config.train
    if train.warmup <= 0:
        return train.lr
    return train.lr * min(1.0, update / train.warmup)


@dataclasses.dataclass
class TrainResult:  # pylint: disable=too-many-instance-attributes
    """The trained model and the bookkeeping of a training run."""

    model: JointModel
    checkpoint: str | None
    updates: int
    losses: list[float]
    accuracies: list[float]
    first_batch: str
    first_selection: str
    config_hash: str
    architecture_hash: str
    validation: list[float] = dataclasses.field(default_factory=list)


# pylint: disable-next=too-many-locals,too-many-statements
def train(
    config: Config,
    corpus: Sequence[AcousticStream] | None = None,
    run_dir: str | os.PathLike | None = None,
    val_corpus: Sequence[AcousticStream] | None = None,
) -> TrainResult:
    """Train a joint model with the configured transforms and return it.

    ``corpus`` and ``val_corpus`` default to the ``train`` and ``val`` splits of the configured
    synthetic corpus. With a ``run_dir``, aggregated metrics are appended to ``metrics.jsonl``
    every ``train.log_every`` updates and the final model is saved as ``model.npz``.

    Raises:
        NumericalError:
            If the loss or the gradient norm becomes non-finite; the diagnostics carry the update,
            the learning rate and the last gradient norm.
    """
    train_cfg = config.train
    if corpus is None:
        corpus = corpus_split(config, 'train')
    if val_corpus is None and train_cfg.n_val > 0:
        val_corpus = corpus_split(config, 'val')
    val_batches = validation_batches(val_corpus or (), config)
    metrics_path = None
    if run_dir is not None:
        run_dir = os.fspath(run_dir)
        os.makedirs(run_dir, exist_ok=True)
        metrics_path = os.path.join(run_dir, 'metrics.jsonl')

    model = JointModel(config)
    params = model.parameters()
    sampler = ExampleSampler(corpus, config)
    state = AdamState()
    collector = MetricCollector(sample_resources=metrics_path is not None)
    result = TrainResult(
        model=model,
        checkpoint=None,
        updates=0,
        losses=[],
        accuracies=[],
        first_batch='',
        first_selection='',
        config_hash=config.hash(),
        architecture_hash=config.architecture_hash(),
    )
    LOGGER.info(
        'Training %d parameters for %d updates (flags: %s).',
        model.num_parameters(),
        train_cfg.updates,
        ','.join(sorted(model_flags(config))) or 'none',
    )

    lr, grad_norm = 0.0, 0.0
    start = time.monotonic()
    with collector(tag='train'):
        for update in range(1, train_cfg.updates + 1):
            batch, selection = sampler.next_batch()
            if update == 1:
                result.first_batch, result.first_selection = batch.digest(), selection

            lr = learning_rate(config, update)
            model.zero_grad()
            out = model.loss(batch)
            loss = out.total.item()
            if not math.isfinite(loss):
                raise NumericalError(
                    'Non-finite training loss',
                    update=update,
                    lr=lr,
                    grad_norm=grad_norm,
                )
            backward(out.total)
            grad_norm = clip_grad_norm(params, train_cfg.clip)
            if not math.isfinite(grad_norm):
                raise NumericalError(
                    'Non-finite gradient norm',
                    update=update,
                    lr=lr,
                    grad_norm=grad_norm,
                )
            state = adam_step(
                params,
                [param.grad for param in params],
                state,
                lr,
                train_cfg.beta1,
                train_cfg.beta2,
            )
            result.updates = update
            result.losses.append(loss)
            result.accuracies.append(out.accuracy)
            collector.add(
                {
                    'loss': loss,
                    'ctc': out.ctc,
                    'aed': out.aed,
                    'accuracy': out.accuracy,
                    'grad_norm': grad_norm,
                    'lr': lr,
                },
            )

            if update % train_cfg.log_every == 0 or update == train_cfg.updates:
                record = collector.collect()
                collector.clear()
                LOGGER.info(
                    'update %d: loss %.4f (ctc %.4f, aed %.4f), acc %.3f, lr %.2e, grad %.3f, '
                    '%.1f updates/s',
                    update,
                    record['train/loss/mean'],
                    record['train/ctc/mean'],
                    record['train/aed/mean'],
                    record['train/accuracy/mean'],
                    lr,
                    grad_norm,
                    update / max(time.monotonic() - start, 1e-9),
                )
                if metrics_path is not None:
                    _append_jsonl(metrics_path, {'update': update, **record})

            if val_batches and train_cfg.val_every > 0 and update % train_cfg.val_every == 0:
                losses = [model.evaluate_loss(batch).total.item() for batch in val_batches]
                value = float(np.mean(losses))
                result.validation.append(value)
                LOGGER.info('update %d: validation loss %.4f', update, value)
                if metrics_path is not None:
                    _append_jsonl(metrics_path, {'update': update, 'val/loss': value})

    if run_dir is not None:
        result.checkpoint = save_checkpoint(
            model,
            os.path.join(run_dir, 'model.npz'),
            updates=result.updates,
            first_batch=result.first_batch,
        )
    return result


# Evaluation #######################################################################################


@dataclasses.dataclass(frozen=True)
class EvalMatrix:
    """The decode conditions to evaluate: encodings x modes x segmentations."""

    encodings: tuple[str, ...] = ENCODINGS
    modes: tuple[str, ...] = MODES
    segmentations: tuple[str, ...] = ('oracle',)

    def __post_init__(self) -> None:
        """Validate the condition names."""
        for name, values, known in (
            ('encodings', self.encodings, ENCODINGS),
            ('modes', self.modes, MODES),
            ('segmentations', self.segmentations, SEGMENTATIONS),
        ):
            object.__setattr__(self, name, tuple(values))
            if not values or not set(values).issubset(known):
                raise ConfigError(f'Invalid {name} {tuple(values)}, expected a subset of {known}')

    def cells(self) -> list[tuple[str, str, str]]:
        """Return the ``(encodings, mode, segmentation)`` conditions in order."""
        return list(itertools.product(self.encodings, self.modes, self.segmentations))

    def __len__(self) -> int:
        """Return the number of conditions."""
        return len(self.encodings) * len(self.modes) * len(self.segmentations)


@dataclasses.dataclass
class EvalCell:  # pylint: disable=too-many-instance-attributes
    """The scores of one decode condition over a test corpus.

    ``trunc_rate`` and ``eos_rate`` count decoded segments, the error rates count tokens.
    """

    encodings: str
    mode: str
    segmentation: str
    report: WerReport
    segments: int = 0
    truncated: int = 0
    finished: int = 0
    failures: int = 0
    transcripts: list[Transcript] = dataclasses.field(default_factory=list, repr=False)

    @property
    def truncation_rate(self) -> float:
        """Fraction of decoded segments stopped by the token cap."""
        return self.truncated / self.segments if self.segments else 0.0

    @property
    def eos_rate(self) -> float:
        """Fraction of decoded segments ended by EOS."""
        return self.finished / self.segments if self.segments else 0.0

    def to_row(self, **extra: Any) -> dict[str, Any]:
        """Return the machine-readable row of the condition."""
        row = dict(extra)
        row.update(encodings=self.encodings, mode=self.mode, segmentation=self.segmentation)
        row.update(self.report.summary())
        row.update(
            trunc_rate=self.truncation_rate,
            eos_rate=self.eos_rate,
            mean_repetition=pathology_report(self.report.rows).mean_repetition,
            segments=self.segments,
            failures=self.failures,
        )
        return row


def _score_cell(
    model: JointModel,
    corpus: Sequence[AcousticStream],
    cfg: DecodeConfig,
    workers: int,
) -> EvalCell:
    def work(stream: AcousticStream) -> Transcript:
        return two_pass_decode(stream, model, cfg)

    if workers > 1 and len(corpus) > 1:
        with ThreadPoolExecutor(max_workers=workers, thread_name_prefix='lfad-eval') as executor:
            transcripts = list(executor.map(work, corpus))
    else:
        transcripts = [work(stream) for stream in corpus]

    cell = EvalCell(cfg.encodings, cfg.mode, cfg.segmentation, WerReport(), transcripts=transcripts)
    for stream, transcript in zip(corpus, transcripts):
        decoded = [result.best for result in transcript.segments if result.best is not None]
        cell.segments += len(transcript.segments)
        cell.truncated += sum(hyp.truncated for hyp in decoded)
        cell.finished += sum(hyp.finished for hyp in decoded)
        cell.failures += transcript.failures
        cell.report.rows.append(
            wer(
                stream.transcript(),
                transcript.tokens,
                id=stream.id,
                truncated=any(hyp.truncated for hyp in decoded),
                finished=bool(decoded) and all(hyp.finished for hyp in decoded),
            ),
        )
    return cell


def evaluate(
    model: JointModel | str | os.PathLike,
    corpus: Sequence[AcousticStream],
    matrix: EvalMatrix | None = None,
    decode: DecodeConfig | None = None,
    expected_hash: str | None = None,
    workers: int = 1,
) -> list[EvalCell]:
    """Decode a test corpus under every condition of ``matrix`` and score it.

    Args:
        model: A trained model or the path of its checkpoint.
        corpus: Test recordings with reference segments.
        matrix: The conditions (default: both encodings, all modes, oracle segmentation).
        decode: The remaining decode options (default: the model configuration).
        expected_hash: The architecture hash a checkpoint must have.
        workers: Threads decoding utterances concurrently over a read-only snapshot.

    Raises:
        VersionError:
            If the checkpoint architecture does not match ``expected_hash``.
        EmptyInputError:
            If the corpus is empty.
    """
    if not isinstance(model, JointModel):
        model, _ = load_checkpoint(model, expected_hash)
    if not corpus:
        raise EmptyInputError('Cannot evaluate on an empty corpus')
    matrix = EvalMatrix() if matrix is None else matrix
    base = model.config.decode if decode is None else decode
    snapshot = model.snapshot()

    cells = []
    for encodings, mode, segmentation in matrix.cells():
        cfg = dataclasses.replace(base, encodings=encodings, mode=mode, segmentation=segmentation)
        cell = _score_cell(snapshot, corpus, cfg, workers)
        LOGGER.info(
            '%s-%s (%s): WER %.4f, truncation %.3f, %d failures.',
            encodings.upper(),
            mode.upper(),
            segmentation,
            cell.report.wer,
            cell.truncation_rate,
            cell.failures,
        )
        cells.append(cell)
    return cells


# Ablation #########################################################################################


@dataclasses.dataclass(frozen=True)
class AblationSpec:
    """The models, replica seeds and decode conditions of an ablation run.

    Conditions with semantic segmentation are skipped for models trained without segmentation
    tokens, whose first pass never closes a segment.
    """

    models: tuple[int, ...] = tuple(MODEL_FLAGS)
    seeds: tuple[int, ...] = (0, 1, 2, 3)
    matrix: EvalMatrix = dataclasses.field(default_factory=EvalMatrix)

    def __post_init__(self) -> None:
        """Validate the model ids and seeds."""
        object.__setattr__(self, 'models', tuple(int(model) for model in self.models))
        object.__setattr__(self, 'seeds', tuple(int(seed) for seed in self.seeds))
        unknown = sorted(set(self.models).difference(MODEL_FLAGS))
        if unknown:
            raise ConfigError(
                f'Unknown model ids {unknown}, expected a subset of {sorted(MODEL_FLAGS)}',
            )
        if not self.models or not self.seeds:
            raise ConfigError('An ablation needs at least one model and one seed')

    def flags(self, model: int) -> frozenset[str]:
        """Return the flags of a model id."""
        return MODEL_FLAGS[model]

    def config_for(self, model: int, seed: int, base: Config) -> Config:
        """Return the configuration of one replica."""
        return apply_flags(base.with_seed(seed), self.flags(model))

    def matrix_for(self, model: int) -> EvalMatrix | None:
        """Return the conditions a model is evaluated under (:data:`None` if there is none)."""
        segmentations = self.matrix.segmentations
        if 'SS' not in self.flags(model):
            segmentations = tuple(name for name in segmentations if name != 'semantic')
        if not segmentations:
            return None
        return dataclasses.replace(self.matrix, segmentations=segmentations)


# pylint: disable-next=too-many-arguments
def _run_replica(
    spec: AblationSpec,
    model_id: int,
    seed: int,
    base: Config,
    corpus: Sequence[AcousticStream],
    test_corpus: Sequence[AcousticStream],
    run_dir: str | None,
) -> list[dict[str, Any]]:
    config = spec.config_for(model_id, seed, base)
    replica_dir = None
    if run_dir is not None:
        replica_dir = make_run_dir(os.path.join(run_dir, f'model{model_id}-seed{seed}'), '', config)
    result = train(config, corpus, replica_dir, val_corpus=())
    matrix = spec.matrix_for(model_id)
    if matrix is None:
        return []
    cells = evaluate(result.model, test_corpus, matrix)
    return [
        cell.to_row(model=model_id, seed=seed, first_selection=result.first_selection)
        for cell in cells
    ]


def _condition(row: dict[str, Any]) -> tuple[int, str, str, str]:
    return (row['model'], row['encodings'], row['mode'], row['segmentation'])


@dataclasses.dataclass
class AblationReport:
    """Per-replica rows of an ablation and the failures of replicas that did not complete."""

    rows: list[dict[str, Any]] = dataclasses.field(default_factory=list)
    failures: dict[str, str] = dataclasses.field(default_factory=dict)

    def median(
        self,
        model: int,
        encodings: str,
        mode: str,
        segmentation: str,
        metric: str = 'wer',
    ) -> float:
        """Median of ``metric`` over the seeds of one condition (NaN if no replica has it)."""
        key = (model, encodings, mode, segmentation)
        values = [row[metric] for row in self.rows if _condition(row) == key]
        return float(statistics.median(values)) if values else math.nan

    def median_rows(self) -> list[dict[str, Any]]:
        """One row per condition with the medians over seeds."""
        keys = sorted({_condition(row) for row in self.rows})
        return [
            {
                'model': model,
                'encodings': encodings,
                'mode': mode,
                'segmentation': segmentation,
                **{
                    metric: self.median(model, encodings, mode, segmentation, metric)
                    for metric in ('wer', 'trunc_rate', 'ins_ratio', 'del_ratio')
                },
            }
            for model, encodings, mode, segmentation in keys
        ]

    def table(self) -> str:
        """Render the medians, one row per model, encodings and segmentation.

        Decoding modes are columns.
        """
        groups = sorted({(model, enc, seg) for model, enc, _, seg in map(_condition, self.rows)})
        lines = []
        for model, encodings, segmentation in groups:
            line: dict[str, Any] = {
                'model': model,
                'flags': '+'.join(flag for flag in FLAGS if flag in MODEL_FLAGS[model]) or '-',
                'encodings': encodings.upper(),
                'segmentation': segmentation,
            }
            for mode in MODES:
                value = self.median(model, encodings, mode, segmentation)
                line[mode.upper()] = '-' if math.isnan(value) else round(100.0 * value, 1)
            line['AD trunc'] = self.median(model, encodings, 'ad', segmentation, 'trunc_rate')
            lines.append(line)
        text = format_table(lines)
        if self.failures:
            failed = (f'  {key}: {message}' for key, message in self.failures.items())
            text += '\n\nfailed replicas:\n' + '\n'.join(failed)
        return text


# pylint: disable-next=too-many-arguments,too-many-locals
def ablate(
    spec: AblationSpec,
    base: Config,
    corpus: Sequence[AcousticStream] | None = None,
    test_corpus: Sequence[AcousticStream] | None = None,
    run_dir: str | os.PathLike | None = None,
    processes: int = 1,
) -> AblationReport:
    """Train and evaluate every model of ``spec`` on shared corpora, one replica per seed.

    All replicas read the same training corpus; replicas with the same seed start from the same
    weights and draw the same recordings. A replica that raises, or whose worker process dies, is
    recorded in :attr:`AblationReport.failures` under its ``model<m>-seed<s>`` key and the others
    complete.
    """
    if corpus is None:
        corpus = corpus_split(base, 'train')
    if test_corpus is None:
        test_corpus = corpus_split(base, 'test', base.train.n_val or 1)
    run_dir = None if run_dir is None else os.fspath(run_dir)
    jobs = list(itertools.product(spec.models, spec.seeds))
    report = AblationReport()

    if processes > 1:
        with ProcessPoolExecutor(max_workers=processes) as executor:
            futures = {
                job: executor.submit(_run_replica, spec, *job, base, corpus, test_corpus, run_dir)
                for job in jobs
            }
            outcomes = {}
            for job, future in futures.items():
                try:
                    outcomes[job] = future.result()
                except Exception as ex:  # noqa: BLE001 # pylint: disable=broad-except
                    outcomes[job] = ex
    else:
        outcomes = {}
        for job in jobs:
            try:
                outcomes[job] = _run_replica(spec, *job, base, corpus, test_corpus, run_dir)
            except Exception as ex:  # noqa: BLE001 # pylint: disable=broad-except
                outcomes[job] = ex

    for (model, seed), outcome in outcomes.items():
        if isinstance(outcome, Exception):
            LOGGER.error('Model %d (seed %d) failed: %r', model, seed, outcome)
            report.failures[f'model{model}-seed{seed}'] = f'{type(outcome).__name__}: {outcome}'
        else:
            report.rows.extend(outcome)

    if run_dir is not None:
        for row in report.rows:
            _append_jsonl(os.path.join(run_dir, 'results.jsonl'), row)
        with open(os.path.join(run_dir, 'report.txt'), mode='w', encoding='utf-8') as file:
            file.write(report.table() + '\n')
    return report


# Mask inspection ##################################################################################


def inspect_mask(spec: MaskSpec, T: int, offset: int = 0) -> list[dict[str, Any]]:  # noqa: N803
    """Describe the attention window and the available contexts of every encoding frame."""
    mask = build_layer_mask(spec, T, 0, offset)
    starts, ends = chunk_bounds(spec, T, offset)
    profile = context_profile(spec, T, offset)
    lfe = profile.lfe_mask()
    rows = []
    for t in range(T):
        visible = np.flatnonzero(mask[t])
        rows.append(
            {
                't': t,
                'chunk': [int(starts[t]), int(ends[t])],
                'attends': [int(visible[0]), int(visible[-1])],
                'c_left': int(profile.c_left[t]),
                'c_right': int(profile.c_right[t]),
                'lfe': bool(lfe[t]),
            },
        )
    return rows


def render_mask(spec: MaskSpec, T: int, offset: int = 0) -> str:  # noqa: N803
    """Draw the layer mask as a character grid (``#`` attendable) with the LFE flag of each row.

    Examples:
        >>> print(render_mask(MaskSpec(L=1, N=1, M=1, R=1), 3))
        #..  C_L=0 C_R=1
        ##.  C_L=1 C_R=1 LFE
        .##  C_L=1 C_R=1 LFE
    """
    mask = build_layer_mask(spec, T, 0, offset)
    lines = []
    for row in inspect_mask(spec, T, offset):
        cells = ''.join('#' if allowed else '.' for allowed in mask[row['t']])
        flag = ' LFE' if row['lfe'] else ''
        lines.append(f'{cells}  C_L={row["c_left"]} C_R={row["c_right"]}{flag}')
    return '\n'.join(lines)
