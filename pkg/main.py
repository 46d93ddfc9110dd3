"""
Main Application
Command-line interface for dwellrec: ingest, preprocess, train, evaluate and
run the experiment pipelines.
"""
import argparse
import json
import logging
import os
import sys
from typing import Any, Dict, List, Optional

from checkpoint_codec import load_checkpoint
from click_loader import ClickLoader, Vocab, build_sessions, serialize_clicks
from evaluation import EvalReport, evaluate
from experiment_config import DEFAULTS, apply_overrides, build_config, load_config, parse_overrides
from experiments import (LOG_FORMAT, EvalConfig, ModelSpec, compare_reports, run_experiment,
                         write_json)
from histogram_plot import plot_dwell_histogram
from model import init_params
from preprocess import (PreprocessConfig, corpus_stats, dwell_histogram, prepare_corpus,
                        read_examples, write_examples, write_histogram_csv)
from synth_generator import SynthSpec, synth_generate
from trainer import TrainConfig, train

logger = logging.getLogger('dwellrec')

PIPELINE_COMMANDS = {'grid': 'grid', 'folds': 'folds', 'run': None}


def setup_logging(verbose: bool):
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    logging.getLogger('matplotlib').setLevel(logging.WARNING)


def resolve_config(args, extra: List[str]) -> Dict[str, Any]:
    """Config file (or defaults), then --seed, then --section.key=value overrides."""
    config = load_config(args.config) if args.config else build_config()
    overrides = parse_overrides(extra)
    if args.seed is not None:
        overrides.append(('seed', args.seed))
    return apply_overrides(config, overrides, args.config)


def load_sessions(path: str, strict: bool):
    loader = ClickLoader(strict=strict)
    sessions = build_sessions(loader.load(path))
    return sessions


def cmd_ingest(args, config):
    sessions = load_sessions(args.input, config['preprocess']['strict'])
    stats = corpus_stats(sessions)
    if args.output:
        with open(args.output, 'wb') as f:
            f.write(serialize_clicks([c for s in sessions for c in s.clicks]))
    print(json.dumps(stats, sort_keys=True))


def cmd_preprocess(args, config):
    sessions = load_sessions(args.input, config['preprocess']['strict'])
    split, prepared = prepare_corpus(sessions, PreprocessConfig(**config['preprocess']))
    os.makedirs(args.out_dir, exist_ok=True)
    prepared.vocab.save(os.path.join(args.out_dir, 'vocab.txt'))
    write_examples(prepared.train_examples, os.path.join(args.out_dir, 'train_examples.tsv'))
    write_examples(prepared.eval_examples, os.path.join(args.out_dir, 'test_examples.tsv'))
    write_histogram_csv(dwell_histogram(prepared.train_sessions, config['preprocess']['dwell_cap']),
                        os.path.join(args.out_dir, 'dwell_histogram.csv'))
    write_json(os.path.join(args.out_dir, 'stats.json'), {
        'boundary_day': split.boundary_day.isoformat(),
        'train': corpus_stats(prepared.train_sessions),
        'test': corpus_stats(prepared.eval_sessions),
        'train_examples': len(prepared.train_examples),
        'test_examples': len(prepared.eval_examples),
    })
    print(f"Wrote vocabulary and examples to {args.out_dir}")


def _load_data_dir(data_dir: str, name: str):
    vocab = Vocab.load(os.path.join(data_dir, 'vocab.txt'))
    return vocab, read_examples(os.path.join(data_dir, name), vocab)


def cmd_train(args, config):
    vocab, examples = _load_data_dir(args.data_dir, 'train_examples.tsv')
    spec = ModelSpec(**config['model'])
    params = init_params(spec.build_config(len(vocab), vocab.dwell_bucket_count), config['seed'])
    train_config = TrainConfig(**config['train'], seed=config['seed'])
    log = train(spec.kind, params, examples, train_config, args.checkpoint_dir, vocab.digest(),
                verbose=args.verbose)
    log.to_csv(os.path.join(args.checkpoint_dir, 'train_log.csv'))
    print(f"Trained {spec.label} for {len(log)} epochs; checkpoints in {args.checkpoint_dir}")


def cmd_eval(args, config):
    vocab, examples = _load_data_dir(args.data_dir, 'test_examples.tsv')
    params, header = load_checkpoint(args.checkpoint, vocab.digest())
    epoch = json.loads(header['extra.epoch']) if 'extra.epoch' in header else None
    eval_config = EvalConfig(**config['eval'])
    report = evaluate(params, examples, eval_config.batch_size, eval_config.k, epoch,
                      eval_config.last_prefix_only)
    if args.output:
        report.write_csv(args.output)
        report.write_json(os.path.splitext(args.output)[0] + '.json')
    print(json.dumps(report.aggregate(), sort_keys=True))


def cmd_synth(args, config):
    synth = dict(config['synth'])
    if synth['seed'] is None:
        synth['seed'] = config['seed']
    with open(args.output, 'wb') as f:
        f.write(synth_generate(SynthSpec(**synth)))
    print(f"Wrote synthetic clicks to {args.output}")


def cmd_histogram(args, config):
    sessions = load_sessions(args.input, config['preprocess']['strict'])
    table = dwell_histogram(sessions, config['preprocess']['dwell_cap'])
    write_histogram_csv(table, args.output)
    if args.png:
        plot_dwell_histogram(table, args.png)
    print(f"Wrote {len(table)} histogram rows to {args.output}")


def cmd_compare(args, config):
    k = config['eval']['k']
    result = compare_reports(EvalReport.read_csv(args.report_a, k), EvalReport.read_csv(args.report_b, k))
    print(json.dumps({'n_effective': result.n_effective, 'statistic': result.statistic,
                      'p_two_sided': result.p_two_sided, 'method': result.method}, sort_keys=True))


def cmd_pipeline(args, config):
    pipeline = PIPELINE_COMMANDS[args.command]
    if pipeline is not None:
        config = apply_overrides(config, [('pipeline', pipeline)], args.config)
    aggregate = run_experiment(config, args.output_dir, args.config, args.verbose)
    print(json.dumps(aggregate, sort_keys=True, indent=2))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description='dwellrec: session-based next-item recommendation with dwell-time GRUs',
        epilog='Any config key can be overridden as --section.key=value, '
               f'sections: {", ".join(sorted(DEFAULTS))}')
    parser.add_argument('--config', type=str, help='JSON experiment config')
    parser.add_argument('--seed', type=int, help='Base seed for generation, initialisation and shuffling')
    parser.add_argument('--verbose', action='store_true', help='Debug logging and progress bars')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('ingest', help='Parse a click file and print corpus statistics')
    p.add_argument('input')
    p.add_argument('--output', help='Write the parsed clicks back out as normalized CSV')

    p = sub.add_parser('preprocess', help='Filter, split and build train/test examples')
    p.add_argument('input')
    p.add_argument('--out-dir', required=True)

    p = sub.add_parser('train', help='Train a model on a preprocessed data directory')
    p.add_argument('--data-dir', required=True)
    p.add_argument('--checkpoint-dir', required=True)

    p = sub.add_parser('eval', help='Evaluate a checkpoint on the test examples')
    p.add_argument('--data-dir', required=True)
    p.add_argument('--checkpoint', required=True)
    p.add_argument('--output', help='Per-example report CSV (a .json aggregate is written next to it)')

    p = sub.add_parser('synth', help='Generate a synthetic click file')
    p.add_argument('--output', required=True)

    p = sub.add_parser('histogram', help='Dwell-time histogram of a click file')
    p.add_argument('input')
    p.add_argument('--output', required=True)
    p.add_argument('--png', help='Also render the histogram to this PNG')

    p = sub.add_parser('compare', help='Wilcoxon signed-rank test between two evaluation reports')
    p.add_argument('report_a')
    p.add_argument('report_b')

    for name, text in (('grid', 'DT-RNN grid search on the last training day'),
                       ('folds', 'Fold-based model-selection study'),
                       ('run', 'Run the pipeline named in the config')):
        p = sub.add_parser(name, help=text)
        p.add_argument('--output-dir', required=True)
    for p in sub.choices.values():
        p.add_argument('--seed', type=int, default=argparse.SUPPRESS, help='Same as the global --seed')
    return parser


COMMANDS = {
    'ingest': cmd_ingest,
    'preprocess': cmd_preprocess,
    'train': cmd_train,
    'eval': cmd_eval,
    'synth': cmd_synth,
    'histogram': cmd_histogram,
    'compare': cmd_compare,
    'grid': cmd_pipeline,
    'folds': cmd_pipeline,
    'run': cmd_pipeline,
}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    setup_logging(args.verbose)
    try:
        config = resolve_config(args, extra)
        COMMANDS[args.command](args, config)
    except (ValueError, KeyError, IndexError, ArithmeticError, OSError) as e:
        message = e.args[0] if isinstance(e, KeyError) and e.args else str(e)
        print('error ' + json.dumps({'type': type(e).__name__, 'message': message}), file=sys.stderr)
        return 1
    return 0


if __name__ == '__main__':
    sys.exit(main())
