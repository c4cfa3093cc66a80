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
from __future__ import annotations

import dataclasses
import json
import math
from concurrent.futures import Future
from concurrent.futures.process import BrokenProcessPool

import numpy as np
import pytest

from lfad.api import harness
from lfad.api.datapipe import generate_corpus
from lfad.api.errors import ConfigError, EmptyInputError, NumericalError
from lfad.api.harness import (
    MODEL_FLAGS,
    AblationReport,
    AblationSpec,
    EvalMatrix,
    ExampleSampler,
    ablate,
    apply_flags,
    corpus_split,
    evaluate,
    inspect_mask,
    learning_rate,
    model_flags,
    render_mask,
    train,
    validation_batches,
)
from lfad.api.masking import MaskSpec
from lfad.api.stream import AcousticStream


SMALL_MATRIX = EvalMatrix(encodings=('sfe',), modes=('ad',), segmentations=('oracle',))


def replica_row(model, seed, wer):
    return {
        'model': model,
        'seed': seed,
        'encodings': 'sfe',
        'mode': 'ad',
        'segmentation': 'oracle',
        'wer': wer,
        'trunc_rate': 0.0,
    }


class TestFlags:
    @pytest.mark.parametrize('model', sorted(MODEL_FLAGS))
    def test_round_trip(self, tiny_config, model):
        assert model_flags(apply_flags(tiny_config, MODEL_FLAGS[model])) == MODEL_FLAGS[model]

    def test_switches(self, tiny_config):
        config = apply_flags(tiny_config, {'AC', 'PE'})
        assert (config.train.sc, config.train.ac, config.train.ss) == (False, True, False)
        assert config.decoder.pe_enabled
        assert config.hash() != apply_flags(tiny_config, {'AC'}).hash()

    def test_unknown(self, tiny_config):
        with pytest.raises(ConfigError, match='XX'):
            apply_flags(tiny_config, {'SC', 'XX'})


class TestCorpusSplit:
    def test_seeds(self, tiny_config):
        R = tiny_config.encoder.R  # noqa: N806
        train_split = corpus_split(tiny_config, 'train', 2)
        reference = generate_corpus(tiny_config.corpus, 2, R)
        for left, right in zip(train_split, reference):
            np.testing.assert_array_equal(left.features, right.features)

        shifted = dataclasses.replace(tiny_config.corpus, seed=tiny_config.corpus.seed + 1)
        val_split = corpus_split(tiny_config, 'val')
        assert len(val_split) == tiny_config.train.n_val
        expected = generate_corpus(shifted, 1, R)[0]
        np.testing.assert_array_equal(val_split[0].features, expected.features)
        assert not np.array_equal(val_split[0].features, train_split[0].features)

    def test_unknown(self, tiny_config):
        with pytest.raises(ConfigError):
            corpus_split(tiny_config, 'dev')


class TestSampler:
    def test_selection_ignores_the_transforms(self, tiny_config, tiny_corpus):
        plain = ExampleSampler(tiny_corpus, apply_flags(tiny_config, ()))
        augmented = ExampleSampler(tiny_corpus, apply_flags(tiny_config, {'SC', 'AC', 'SS'}))
        for _ in range(3):
            _, left = plain.next_batch()
            _, right = augmented.next_batch()
            assert left == right

    def test_batch_shape(self, tiny_config, tiny_corpus):
        batch, _ = ExampleSampler(tiny_corpus, tiny_config).next_batch()
        assert len(batch) == tiny_config.train.batch
        assert batch.chunk_size in tiny_config.encoder.M_list

    def test_needs_segments(self, tiny_config, tiny_corpus):
        bare = [AcousticStream(stream.features, id=stream.id) for stream in tiny_corpus]
        with pytest.raises(EmptyInputError):
            ExampleSampler(bare, tiny_config)

    def test_validation_batches(self, tiny_config, tiny_corpus):
        batches = validation_batches(tiny_corpus, tiny_config)
        assert sum(map(len, batches)) == sum(len(stream.segments) for stream in tiny_corpus)
        assert {batch.chunk_size for batch in batches} == {tiny_config.encoder.M_list[0]}
        assert validation_batches([], tiny_config) == []


def test_learning_rate(tiny_config):
    train_config = dataclasses.replace(tiny_config.train, warmup=4, lr=1e-3)
    config = dataclasses.replace(tiny_config, train=train_config)
    assert learning_rate(config, 2) == pytest.approx(5e-4)
    assert learning_rate(config, 4) == pytest.approx(1e-3)
    assert learning_rate(config, 40) == pytest.approx(1e-3)
    no_warmup = dataclasses.replace(config, train=dataclasses.replace(config.train, warmup=0))
    assert learning_rate(no_warmup, 1) == pytest.approx(1e-3)


class TestTrain:
    def test_run_directory(self, tmp_path, tiny_config, tiny_corpus):
        result = train(tiny_config, tiny_corpus, tmp_path)
        assert result.updates == tiny_config.train.updates
        assert len(result.losses) == tiny_config.train.updates
        assert all(map(math.isfinite, result.losses))
        assert len(result.validation) == 1
        assert result.architecture_hash == tiny_config.architecture_hash()

        lines = (tmp_path / 'metrics.jsonl').read_text().splitlines()
        records = [json.loads(line) for line in lines]
        train_records = [record for record in records if 'train/loss/mean' in record]
        val_records = [record for record in records if 'val/loss' in record]
        assert [record['update'] for record in train_records] == [1, 2, 3]
        assert [record['update'] for record in val_records] == [2]
        assert train_records[0]['train/loss/mean'] == pytest.approx(result.losses[0])

        assert result.checkpoint == str(tmp_path / 'model.npz')
        header = harness.load_checkpoint(result.checkpoint)[1]
        assert header['first_batch'] == result.first_batch
        assert header['updates'] == tiny_config.train.updates

    def test_same_seed_same_run(self, tiny_config, tiny_corpus):
        first = train(tiny_config, tiny_corpus, val_corpus=())
        second = train(tiny_config, tiny_corpus, val_corpus=())
        assert first.first_batch == second.first_batch
        assert first.losses == second.losses
        assert first.checkpoint is None
        assert first.validation == []

    def test_divergence(self, tiny_config, tiny_corpus):
        train_config = dataclasses.replace(tiny_config.train, lr=math.inf)
        config = dataclasses.replace(tiny_config, train=train_config)
        with pytest.raises(NumericalError) as info:
            train(config, tiny_corpus, val_corpus=())
        assert 'update' in info.value.diagnostics


class TestEvaluate:
    def test_matrix(self):
        assert len(EvalMatrix()) == 6
        assert EvalMatrix(segmentations=('oracle', 'vad')).cells()[:2] == [
            ('lfe', 'ar', 'oracle'),
            ('lfe', 'ar', 'vad'),
        ]
        with pytest.raises(ConfigError):
            EvalMatrix(modes=('beam',))
        with pytest.raises(ConfigError):
            EvalMatrix(encodings=())

    def test_cells(self, tiny_model, tiny_corpus):
        matrix = EvalMatrix(encodings=('lfe', 'sfe'), modes=('ad',))
        cells = evaluate(tiny_model, tiny_corpus, matrix, workers=2)
        assert [(cell.encodings, cell.mode, cell.segmentation) for cell in cells] == [
            ('lfe', 'ad', 'oracle'),
            ('sfe', 'ad', 'oracle'),
        ]
        for cell in cells:
            assert cell.segments == sum(len(stream.segments) for stream in tiny_corpus)
            assert len(cell.report.rows) == len(tiny_corpus)
            assert 0.0 <= cell.truncation_rate <= 1.0
            assert cell.truncated + cell.finished <= cell.segments
            row = cell.to_row(model=3)
            assert row['model'] == 3
            assert row['wer'] == cell.report.wer
            assert row['trunc_rate'] == cell.truncation_rate

    def test_checkpoint_and_empty_corpus(self, tmp_path, tiny_model, tiny_corpus):
        path = harness.save_checkpoint(tiny_model, tmp_path / 'model.npz')
        cells = evaluate(path, tiny_corpus[:1], SMALL_MATRIX)
        assert len(cells) == 1
        with pytest.raises(EmptyInputError):
            evaluate(tiny_model, [], SMALL_MATRIX)


class TestAblation:
    def test_spec(self, tiny_config):
        matrix = EvalMatrix(segmentations=('semantic', 'oracle'))
        spec = AblationSpec(models=(0, 5), seeds=(1,), matrix=matrix)
        assert spec.matrix_for(0).segmentations == ('oracle',)
        assert spec.matrix_for(5).segmentations == ('semantic', 'oracle')
        semantic_only = AblationSpec(models=(1,), matrix=EvalMatrix(segmentations=('semantic',)))
        assert semantic_only.matrix_for(1) is None

        config = spec.config_for(5, 1, tiny_config)
        assert config.train.seed == 1
        assert model_flags(config) == MODEL_FLAGS[5]
        with pytest.raises(ConfigError):
            AblationSpec(models=(9,))
        with pytest.raises(ConfigError):
            AblationSpec(seeds=())

    def test_failed_replica_is_isolated(self, tmp_path, monkeypatch, tiny_config, tiny_corpus):
        real_train = harness.train

        def flaky_train(config, *args, **kwargs):
            if config.train.seed == 1:
                raise NumericalError('Non-finite training loss', update=1)
            return real_train(config, *args, **kwargs)

        monkeypatch.setattr(harness, 'train', flaky_train)
        spec = AblationSpec(models=(0,), seeds=(0, 1), matrix=SMALL_MATRIX)
        report = ablate(spec, tiny_config, tiny_corpus, tiny_corpus[:1], run_dir=tmp_path)

        assert [(row['model'], row['seed']) for row in report.rows] == [(0, 0)]
        assert list(report.failures) == ['model0-seed1']
        assert report.median(0, 'sfe', 'ad', 'oracle') == report.rows[0]['wer']
        assert math.isnan(report.median(0, 'lfe', 'ad', 'oracle'))

        assert len((tmp_path / 'results.jsonl').read_text().splitlines()) == 1
        text = (tmp_path / 'report.txt').read_text()
        assert 'failed replicas' in text
        assert (tmp_path / 'model0-seed0' / 'model.npz').exists()

    def test_unexpected_replica_error_is_recorded(self, monkeypatch, tiny_config, tiny_corpus):
        def replica(spec, model, seed, *args):
            if seed == 1:
                raise RuntimeError('out of memory')
            return [replica_row(model, seed, 0.25)]

        monkeypatch.setattr(harness, '_run_replica', replica)
        spec = AblationSpec(models=(0,), seeds=(0, 1), matrix=SMALL_MATRIX)
        report = ablate(spec, tiny_config, tiny_corpus, tiny_corpus[:1])

        assert [row['seed'] for row in report.rows] == [0]
        assert report.failures == {'model0-seed1': 'RuntimeError: out of memory'}

    def test_dead_worker_is_recorded(self, monkeypatch, tiny_config, tiny_corpus):
        class DeadWorkerExecutor:
            def __init__(self, max_workers):
                self.max_workers = max_workers

            def __enter__(self):
                return self

            def __exit__(self, *exc_info):
                return False

            def submit(self, fn, spec, model, seed, *args):
                future = Future()
                if seed == 1:
                    future.set_exception(BrokenProcessPool('worker terminated abruptly'))
                else:
                    future.set_result([replica_row(model, seed, 0.5)])
                return future

        monkeypatch.setattr(harness, 'ProcessPoolExecutor', DeadWorkerExecutor)
        spec = AblationSpec(models=(0, 2), seeds=(0, 1), matrix=SMALL_MATRIX)
        report = ablate(spec, tiny_config, tiny_corpus, tiny_corpus[:1], processes=2)

        assert [(row['model'], row['seed']) for row in report.rows] == [(0, 0), (2, 0)]
        assert sorted(report.failures) == ['model0-seed1', 'model2-seed1']
        assert report.failures['model2-seed1'].startswith('BrokenProcessPool:')
        assert 'failed replicas' in report.table()

    def test_medians(self):
        rows = [
            {'model': 1, 'encodings': 'lfe', 'mode': 'ad', 'segmentation': 'oracle', 'wer': wer,
             'trunc_rate': 0.0, 'ins_ratio': 0.0, 'del_ratio': 0.0}
            for wer in (0.3, 0.1, 0.2)
        ]
        report = AblationReport(rows=rows)
        assert report.median(1, 'lfe', 'ad', 'oracle') == pytest.approx(0.2)
        assert report.median_rows()[0]['wer'] == pytest.approx(0.2)
        table = report.table()
        assert 'SC' in table
        assert '20.0' in table


class TestInspectMask:
    def test_rows(self):
        rows = inspect_mask(MaskSpec(L=1, N=1, M=1, R=1), 3)
        assert [(row['c_left'], row['c_right'], row['lfe']) for row in rows] == [
            (0, 1, False),
            (1, 1, True),
            (1, 1, True),
        ]
        assert [row['t'] for row in rows] == [0, 1, 2]

    def test_render(self):
        assert render_mask(MaskSpec(L=1, N=1, M=1, R=1), 3).splitlines() == [
            '#..  C_L=0 C_R=1',
            '##.  C_L=1 C_R=1 LFE',
            '.##  C_L=1 C_R=1 LFE',
        ]
