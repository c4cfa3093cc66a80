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
"""The command line interface of lfad."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
from typing import Any, Callable, Sequence

from lfad.api import harness
from lfad.api.config import Config, load_config
from lfad.api.datapipe import load_corpus, save_corpus, save_examples
from lfad.api.decode import ENCODINGS, MODES, SEGMENTATIONS, Transcript, two_pass_decode
from lfad.api.errors import ConfigError, LfadError
from lfad.api.masking import LOOKBACK_ANCHORS, MaskSpec
from lfad.api.metrics import format_table
from lfad.api.model import load_checkpoint
from lfad.api.utils import LOGGER, colored, cprint, set_color, timedelta2human
from lfad.api.vocab import RESERVED, Vocabulary, strip_special
from lfad.version import __version__


DECODE_OPTIONS = (
    'mode',
    'segmentation',
    'encodings',
    'beam',
    'nbest',
    'chunk_size',
    'max_tokens',
    'workers',
)


def _common_options() -> argparse.ArgumentParser:
    parent = argparse.ArgumentParser(add_help=False)
    parent.add_argument(
        '--config',
        '-c',
        dest='config',
        metavar='FILE',
        default=None,
        help='Configuration file, flat `section.key = value` lines or JSON.',
    )
    parent.add_argument(
        '--set',
        dest='overrides',
        metavar='KEY=VALUE',
        action='append',
        default=[],
        help='Override one configuration entry, e.g. `--set train.updates=100`. (repeatable)',
    )
    parent.add_argument(
        '--seed',
        dest='seed',
        type=int,
        default=None,
        help='Override every seed of the configuration.',
    )
    parent.add_argument(
        '--run-dir',
        dest='run_dir',
        metavar='DIR',
        default=None,
        help='Output directory. (default: runs/<command>-<timestamp>)',
    )
    parent.add_argument(
        '--verbose',
        '-v',
        dest='verbose',
        action='store_true',
        help='Log progress messages.',
    )
    parent.add_argument(
        '--force-color',
        dest='force_color',
        action='store_true',
        help='Force colorize even when `stderr` is not a TTY terminal.',
    )
    return parent


def _matrix_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        '--encodings',
        nargs='+',
        choices=ENCODINGS,
        default=list(ENCODINGS),
        help='Encodings to decode from. (default: %(default)s)',
    )
    parser.add_argument(
        '--modes',
        nargs='+',
        choices=MODES,
        default=list(MODES),
        help='Second-pass modes. (default: %(default)s)',
    )
    parser.add_argument(
        '--segmentations',
        nargs='+',
        choices=SEGMENTATIONS,
        default=['oracle'],
        help='Segmentation sources. (default: %(default)s)',
    )


# pylint: disable-next=too-many-statements
def parse_arguments(argv: Sequence[str] | None = None) -> argparse.Namespace:
    """Parse command-line arguments for ``lfad``."""

    def posint(argstring: str) -> int:
        num = int(argstring)
        if num <= 0:
            raise ValueError
        return num

    posint.__name__ = 'positive int'

    parser = argparse.ArgumentParser(
        prog='lfad',
        description='Long-form attention decoding on a desk-scale speech model.',
        formatter_class=argparse.RawTextHelpFormatter,
        add_help=False,
    )
    parser.add_argument(
        '--help',
        '-h',
        dest='help',
        action='help',
        default=argparse.SUPPRESS,
        help='Show this help message and exit.',
    )
    parser.add_argument(
        '--version',
        '-V',
        dest='version',
        action='version',
        version=f'%(prog)s {__version__}',
        help="Show %(prog)s's version number and exit.",
    )
    common = _common_options()
    commands = parser.add_subparsers(dest='command', metavar='COMMAND', required=True)

    gen_corpus = commands.add_parser(
        'gen-corpus',
        parents=[common],
        help='Generate a synthetic corpus as JSON lines.',
    )
    gen_corpus.add_argument(
        '--out',
        '-o',
        required=True,
        metavar='FILE',
        help='Output corpus file.',
    )
    gen_corpus.add_argument(
        '--n',
        dest='n',
        type=posint,
        default=None,
        help='Number of recordings.',
    )
    gen_corpus.add_argument(
        '--split',
        choices=harness.CORPUS_SPLITS,
        default='train',
        help='Corpus split; each split has its own seed. (default: %(default)s)',
    )
    gen_corpus.add_argument(
        '--transformed',
        action='store_true',
        help='Write one SC/AC/SS training example per recording instead of the recordings.',
    )
    gen_corpus.add_argument(
        '--vocab',
        metavar='FILE',
        default=None,
        help='Also write the vocabulary file.',
    )

    train = commands.add_parser(
        'train',
        parents=[common],
        help='Train a joint CTC/attention model.',
    )
    train.add_argument(
        '--corpus',
        metavar='FILE',
        default=None,
        help='Training corpus. (default: generated)',
    )
    train.add_argument(
        '--val-corpus',
        metavar='FILE',
        default=None,
        help='Validation corpus. (default: generated)',
    )
    train.add_argument('--updates', type=int, default=None, help='Override `train.updates`.')

    decode = commands.add_parser(
        'decode',
        parents=[common],
        help='Decode a corpus with a checkpoint.',
    )
    decode.add_argument(
        '--checkpoint',
        required=True,
        metavar='FILE',
        help='Model checkpoint (.npz).',
    )
    decode.add_argument('--corpus', required=True, metavar='FILE', help='Corpus to decode.')
    decode.add_argument('--mode', choices=MODES, default=None, help='Second-pass mode.')
    decode.add_argument(
        '--segmentation',
        choices=SEGMENTATIONS,
        default=None,
        help='Segmentation source.',
    )
    decode.add_argument('--encodings', choices=ENCODINGS, default=None, help='Segment encodings.')
    decode.add_argument('--beam', type=posint, default=None, help='Beam size.')
    decode.add_argument('--nbest', type=posint, default=None, help='Hypotheses kept per segment.')
    decode.add_argument(
        '--chunk-size',
        type=posint,
        default=None,
        help='Encoder chunk size at inference.',
    )
    decode.add_argument('--max-tokens', type=posint, default=None, help='Token cap per segment.')
    decode.add_argument('--workers', type=posint, default=None, help='Threads decoding segments.')

    evaluate = commands.add_parser(
        'evaluate',
        parents=[common],
        help='Score a checkpoint on a test corpus.',
    )
    evaluate.add_argument(
        '--checkpoint',
        required=True,
        metavar='FILE',
        help='Model checkpoint (.npz).',
    )
    evaluate.add_argument(
        '--corpus',
        metavar='FILE',
        default=None,
        help='Test corpus. (default: generated)',
    )
    evaluate.add_argument('--workers', type=posint, default=1, help='Threads decoding utterances.')
    _matrix_options(evaluate)

    ablate = commands.add_parser(
        'ablate',
        parents=[common],
        help='Train and score the transform ablation grid.',
    )
    ablate.add_argument(
        '--models',
        nargs='+',
        type=int,
        choices=sorted(harness.MODEL_FLAGS),
        default=sorted(harness.MODEL_FLAGS),
        help='Model ids. (default: %(default)s)',
    )
    ablate.add_argument('--seeds', nargs='+', type=int, default=[0, 1, 2, 3], help='Replica seeds.')
    ablate.add_argument(
        '--corpus',
        metavar='FILE',
        default=None,
        help='Training corpus. (default: generated)',
    )
    ablate.add_argument(
        '--test-corpus',
        metavar='FILE',
        default=None,
        help='Test corpus. (default: generated)',
    )
    ablate.add_argument('--processes', type=posint, default=1, help='Replicas trained in parallel.')
    _matrix_options(ablate)

    inspect_mask = commands.add_parser(
        'inspect-mask',
        parents=[common],
        help='Show the attention mask and the available contexts of every frame.',
    )
    inspect_mask.add_argument(
        '--spec',
        metavar='L,N,M,R',
        default=None,
        help='Mask geometry. (default: encoder)',
    )
    inspect_mask.add_argument('--frames', '-T', type=posint, default=16, help='Encoding frames.')
    inspect_mask.add_argument(
        '--offset',
        type=int,
        default=0,
        help='Absolute index of the first frame.',
    )
    inspect_mask.add_argument(
        '--lookback',
        choices=LOOKBACK_ANCHORS,
        default=None,
        help='Look-back anchor.',
    )
    inspect_mask.add_argument('--json', action='store_true', help='Emit one JSON object per frame.')

    return parser.parse_args(argv)


def _load_config(args: argparse.Namespace) -> Config:
    overrides = {}
    for item in args.overrides:
        key, sep, value = item.partition('=')
        if not sep:
            raise ConfigError(f'Expected KEY=VALUE, got {item!r}')
        overrides[key.strip()] = value.strip()
    config = load_config(args.config, overrides)
    if args.seed is not None:
        config = config.with_seed(args.seed)
    return config


def _eval_matrix(args: argparse.Namespace) -> harness.EvalMatrix:
    return harness.EvalMatrix(tuple(args.encodings), tuple(args.modes), tuple(args.segmentations))


def _write_json_lines(path: str, records: Sequence[dict[str, Any]]) -> None:
    with open(path, mode='w', encoding='utf-8') as file:
        file.writelines(json.dumps(record) + '\n' for record in records)


def _transcript_record(transcript: Transcript) -> dict[str, Any]:
    return {
        'id': transcript.stream_id,
        'tokens': strip_special(transcript.tokens),
        'first_pass': transcript.first_pass,
        'dropped': transcript.dropped,
        'segments': [
            {
                't_b': result.segment.t_b,
                't_e': result.segment.t_e,
                'error': result.error,
                'nbest': [
                    {
                        'tokens': list(hyp.tokens),
                        'score': hyp.score,
                        'attention': hyp.attention,
                        'ctc': hyp.ctc,
                        'finished': hyp.finished,
                        'truncated': hyp.truncated,
                    }
                    for hyp in result.hypotheses
                ],
            }
            for result in transcript.segments
        ],
    }


def command_gen_corpus(args: argparse.Namespace, config: Config) -> list[str]:
    """Write a synthetic corpus (or its transformed training examples)."""
    corpus = harness.corpus_split(config, args.split, args.n)
    if args.transformed:
        sampler = harness.ExampleSampler(corpus, config)
        count = save_examples((sampler.example(stream) for stream in sampler.corpus), args.out)
        message = f'INFO: Wrote {count} training examples to {args.out!r}.'
    else:
        count = save_corpus(corpus, args.out)
        message = f'INFO: Wrote {count} recordings to {args.out!r}.'
    if args.vocab is not None:
        Vocabulary.synthetic(config.corpus.vocab_size - len(RESERVED)).save(args.vocab)
    return [message]


def command_train(args: argparse.Namespace, config: Config) -> list[str]:
    """Train a model and save its checkpoint in the run directory."""
    if args.updates is not None:
        train_config = dataclasses.replace(config.train, updates=args.updates)
        config = dataclasses.replace(config, train=train_config)
    run_dir = harness.make_run_dir(args.run_dir, 'train', config)
    corpus = None if args.corpus is None else load_corpus(args.corpus)
    val_corpus = None if args.val_corpus is None else load_corpus(args.val_corpus)
    result = harness.train(config, corpus, run_dir, val_corpus)
    messages = [
        f'INFO: Trained {result.updates} updates, final loss {result.losses[-1]:.4f}.'
        if result.losses
        else 'INFO: Trained 0 updates.',
        f'INFO: Checkpoint {result.checkpoint!r} (architecture {result.architecture_hash[:12]}).',
    ]
    return messages


def command_decode(args: argparse.Namespace, config: Config) -> list[str]:
    """Decode every recording of a corpus and write ranked hypotheses per segment."""
    expected = config.architecture_hash() if args.config is not None else None
    model, _ = load_checkpoint(args.checkpoint, expected)
    options = {
        key: getattr(args, key)
        for key in DECODE_OPTIONS
        if getattr(args, key) is not None
    }
    base = config.decode if args.config is not None else model.config.decode
    cfg = dataclasses.replace(base, **options)
    run_dir = harness.make_run_dir(
        args.run_dir,
        'decode',
        dataclasses.replace(model.config, decode=cfg),
    )
    vocab = Vocabulary.synthetic(model.vocab_size - len(RESERVED))

    transcripts = [two_pass_decode(stream, model, cfg) for stream in load_corpus(args.corpus)]
    records = [_transcript_record(transcript) for transcript in transcripts]
    _write_json_lines(os.path.join(run_dir, 'decode.jsonl'), records)
    for transcript in transcripts:
        print(f'{transcript.stream_id}: {" ".join(vocab.decode(strip_special(transcript.tokens)))}')
    failures = sum(transcript.failures for transcript in transcripts)
    messages = [f'INFO: Decoded {len(transcripts)} recordings into {run_dir!r}.']
    if failures:
        messages.append(f'WARNING: {failures} segments failed to decode.')
    truncations = sum(transcript.truncations for transcript in transcripts)
    if truncations:
        messages.append(f'WARNING: {truncations} segments hit the token cap.')
    return messages


def command_evaluate(args: argparse.Namespace, config: Config) -> list[str]:
    """Score a checkpoint over the evaluation matrix."""
    expected = config.architecture_hash() if args.config is not None else None
    model, _ = load_checkpoint(args.checkpoint, expected)
    corpus = (
        harness.corpus_split(model.config, 'test', model.config.train.n_val or 1)
        if args.corpus is None
        else load_corpus(args.corpus)
    )
    matrix = _eval_matrix(args)
    run_dir = harness.make_run_dir(args.run_dir, 'evaluate', model.config)
    cells = harness.evaluate(model, corpus, matrix, workers=args.workers)
    rows = [cell.to_row() for cell in cells]
    _write_json_lines(os.path.join(run_dir, 'results.jsonl'), rows)
    columns = ['encodings', 'mode', 'segmentation', 'wer', 'trunc_rate', 'ins_ratio', 'del_ratio']
    table = format_table(rows, [*columns, 'eos_rate'])
    with open(os.path.join(run_dir, 'report.txt'), mode='w', encoding='utf-8') as file:
        file.write(table + '\n')
    print(table)
    return [f'INFO: Results written to {run_dir!r}.']


def command_ablate(args: argparse.Namespace, config: Config) -> list[str]:
    """Run the ablation grid and write the report."""
    spec = harness.AblationSpec(
        models=tuple(args.models),
        seeds=tuple(args.seeds),
        matrix=_eval_matrix(args),
    )
    run_dir = harness.make_run_dir(args.run_dir, 'ablate', config)
    corpus = None if args.corpus is None else load_corpus(args.corpus)
    test_corpus = None if args.test_corpus is None else load_corpus(args.test_corpus)
    report = harness.ablate(spec, config, corpus, test_corpus, run_dir, processes=args.processes)
    print(report.table())
    messages = [f'INFO: Report written to {os.path.join(run_dir, "report.txt")!r}.']
    messages.extend(
        f'ERROR: Replica {key} failed: {message}' for key, message in report.failures.items()
    )
    return messages


def command_inspect_mask(args: argparse.Namespace, config: Config) -> list[str]:
    """Print the attention mask and the context profile of a geometry."""
    lookback = args.lookback or config.encoder.lookback
    if args.spec is None:
        spec = dataclasses.replace(config.encoder.mask_spec(), lookback=lookback)
    else:
        spec = MaskSpec.parse(args.spec, lookback)
    if args.json:
        for row in harness.inspect_mask(spec, args.frames, args.offset):
            print(json.dumps(row))
    else:
        print(harness.render_mask(spec, args.frames, args.offset))
        print(
            'C_L_max = {}, C_R_max = {} acoustic frames'.format(
                colored(str(spec.c_l_max), attrs=('bold',)),
                colored(str(spec.c_r_max), attrs=('bold',)),
            ),
        )
    return []


HANDLERS: dict[str, Callable[[argparse.Namespace, Config], list[str]]] = {
    'gen-corpus': command_gen_corpus,
    'train': command_train,
    'decode': command_decode,
    'evaluate': command_evaluate,
    'ablate': command_ablate,
    'inspect-mask': command_inspect_mask,
}


def main(argv: Sequence[str] | None = None) -> int:
    """Main function for ``lfad`` CLI."""
    args = parse_arguments(argv)

    if args.force_color:
        set_color(True)
    if args.verbose and not LOGGER.isEnabledFor(logging.INFO):
        LOGGER.setLevel(logging.INFO)
    if args.verbose and not LOGGER.hasHandlers():
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter('[%(levelname)s] %(asctime)s %(name)s: %(message)s'))
        LOGGER.addHandler(handler)

    start = time.monotonic()
    try:
        config = _load_config(args)
        messages = HANDLERS[args.command](args, config)
    except LfadError as ex:
        cprint(f'ERROR: {ex}')
        return 1
    except OSError as ex:
        cprint(f'ERROR: {ex.strerror}: {ex.filename!r}' if ex.filename else f'ERROR: {ex}')
        return 1

    for message in messages:
        cprint(message)
    if args.verbose:
        cprint(f'INFO: Finished `{args.command}` in {timedelta2human(time.monotonic() - start)}.')
    return 1 if any(message.startswith('ERROR:') for message in messages) else 0


if __name__ == '__main__':
    sys.exit(main())
