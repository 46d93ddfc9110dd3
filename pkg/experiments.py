"""
Experiments
Study drivers: DT-RNN grid search, the fold-based model-selection study, the
item representation/augmentation comparison, the synthetic dwell-signal study
and the config-driven run_experiment pipeline.
"""
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from itertools import product
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from click_loader import ClickLoader, Session, build_sessions, digest_file, serialize_clicks
from evaluation import (DEFAULT_CUTOFF, EmptyInputError, EvalReport, WilcoxonResult, best_epoch,
                        evaluate, fold_average, wilcoxon_signed_rank)
from experiment_config import ConfigError
from model import DtRnnConfig, ItRnnConfig, ModelConfig, ModelParams, init_params
from preprocess import (MAX_INPUT_LENGTH, PreparedSplit, PreprocessConfig, build_examples,
                        corpus_stats, dwell_histogram, make_folds, prepare_corpus, prepare_split,
                        write_histogram_csv)
from synth_generator import (ClickstreamGenerator, SynthSpec, bayes_optimal_recall_at_1,
                             bayes_optimal_recall_at_k, dwell_transition_mutual_information)
from trainer import TrainConfig, TrainLog, train

logger = logging.getLogger(__name__)

LOG_FORMAT = '[%(name)s] %(message)s'


@dataclass
class GridSpec:
    """DT-RNN sizes searched with the item part held fixed."""
    dt_em_sizes: List[int] = field(default_factory=lambda: [4, 8, 16, 32])
    dt_rnn_sizes: List[int] = field(default_factory=lambda: [4, 8, 16, 32, 64, 128])

    def __post_init__(self):
        for name in ('dt_em_sizes', 'dt_rnn_sizes'):
            values = getattr(self, name)
            if not values or any(v < 1 for v in values):
                raise ValueError(f"{name} must be a non-empty list of positive sizes, got {values}")

    def cells(self) -> List[Tuple[int, int]]:
        return list(product(self.dt_em_sizes, self.dt_rnn_sizes))


@dataclass
class ModelSpec:
    """Which model to build and with which sizes."""
    kind: str = 'dt'
    item_em_size: int = 128
    it_rnn_size: int = 128
    dt_em_size: int = 16
    dt_rnn_size: int = 8
    item_encoding: str = 'embedding'
    label: str = ''

    def __post_init__(self):
        if self.kind not in ('it', 'dt'):
            raise ValueError(f"model kind must be 'it' or 'dt', got {self.kind!r}")
        if not self.label:
            if self.kind == 'dt':
                self.label = f"dt_em{self.dt_em_size}_rnn{self.dt_rnn_size}"
            else:
                self.label = f"it_{self.item_encoding}"

    def build_config(self, num_items: int, dwell_bucket_count: int,
                     max_len: int = MAX_INPUT_LENGTH) -> ModelConfig:
        base = ItRnnConfig(num_items, self.item_em_size, self.it_rnn_size, max_len, self.item_encoding)
        if self.kind == 'it':
            return base
        return DtRnnConfig(base, self.dt_em_size, self.dt_rnn_size, dwell_bucket_count)

    def with_sizes(self, **changes) -> 'ModelSpec':
        data = asdict(self)
        data.update(changes)
        data['label'] = changes.get('label', '')
        return ModelSpec(**data)


@dataclass
class EvalConfig:
    k: int = DEFAULT_CUTOFF
    batch_size: int = 1024
    last_prefix_only: bool = False


@dataclass
class FitResult:
    """A trained model's per-epoch reports and the best one."""
    spec: ModelSpec
    best: EvalReport
    reports: List[EvalReport]
    log: TrainLog
    num_parameters: int
    params: Optional[ModelParams] = None


def fit_and_select(spec: ModelSpec, prepared: PreparedSplit, train_config: TrainConfig,
                   eval_config: Optional[EvalConfig] = None, train_examples=None,
                   checkpoint_dir: Optional[str] = None, keep_params: bool = False,
                   verbose: bool = False) -> FitResult:
    """Train spec on the split's train examples, evaluate after every epoch, keep the best epoch."""
    eval_config = eval_config or EvalConfig()
    examples = prepared.train_examples if train_examples is None else train_examples
    if not examples or not prepared.eval_examples:
        raise EmptyInputError(f"{spec.label}: empty training or evaluation examples")
    vocab = prepared.vocab
    params = init_params(spec.build_config(len(vocab), vocab.dwell_bucket_count), train_config.seed)
    reports: List[EvalReport] = []

    def on_epoch_complete(record, trained: ModelParams):
        reports.append(evaluate(trained, prepared.eval_examples, eval_config.batch_size,
                                eval_config.k, record.epoch, eval_config.last_prefix_only))

    log = train(spec.kind, params, examples, train_config, checkpoint_dir, vocab.digest(),
                on_epoch_complete, verbose)
    best = best_epoch(reports)
    logger.info("%s: best epoch %s, recall@%d %.4f, mrr@%d %.4f", spec.label, best.epoch,
                best.k, best.recall, best.k, best.mrr)
    return FitResult(spec, best, reports, log, params.num_parameters(),
                     params if keep_params else None)


def _run_jobs(jobs: Sequence[Callable[[], Any]], workers: int) -> List[Any]:
    if workers <= 1:
        return [job() for job in jobs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda job: job(), jobs))


@dataclass
class GridRow:
    dt_em_size: int
    dt_rnn_size: int
    recall: float
    mrr: float
    epoch: Optional[int]
    num_parameters: int
    kind: str = 'dt'

    @property
    def label(self) -> str:
        return f"dt_em{self.dt_em_size}_rnn{self.dt_rnn_size}" if self.kind == 'dt' else 'it_control'

    def sort_key(self):
        return (-self.recall, -self.mrr, self.num_parameters, self.dt_em_size, self.dt_rnn_size)


def grid_search(grid: GridSpec, train_sessions: Sequence[Session], val_sessions: Sequence[Session],
                train_config: TrainConfig, base_spec: Optional[ModelSpec] = None,
                eval_config: Optional[EvalConfig] = None,
                preprocess: Optional[PreprocessConfig] = None, workers: int = 1,
                with_control: bool = False) -> List[GridRow]:
    """
    Train one DT-RNN per (dt_em_size, dt_rnn_size) cell with the shared seed and
    rank the cells by validation Recall@K, then MRR@K, then smaller models.

    with_control adds an IT-RNN row (dwell sizes 0, kind 'it') built from the
    same item sizes, ranked with the DT cells.
    """
    if not train_sessions or not val_sessions:
        raise EmptyInputError("grid search needs non-empty train and validation splits")
    base_spec = base_spec or ModelSpec()
    preprocess = preprocess or PreprocessConfig()
    prepared = prepare_split(train_sessions, val_sessions, preprocess.dwell_cap,
                             preprocess.augment_train, preprocess.augment_eval)

    def job(cell: Tuple[int, int]) -> Callable[[], GridRow]:
        def run() -> GridRow:
            if cell == (0, 0):
                spec = base_spec.with_sizes(kind='it')
            else:
                spec = base_spec.with_sizes(kind='dt', dt_em_size=cell[0], dt_rnn_size=cell[1])
            fit = fit_and_select(spec, prepared, train_config, eval_config)
            return GridRow(cell[0], cell[1], fit.best.recall, fit.best.mrr, fit.best.epoch,
                           fit.num_parameters, spec.kind)
        return run

    cells = grid.cells() + ([(0, 0)] if with_control else [])
    rows = _run_jobs([job(cell) for cell in cells], workers)
    rows.sort(key=GridRow.sort_key)
    logger.info("grid winner: %s (recall %.4f)", rows[0].label, rows[0].recall)
    control = next((row for row in rows if row.kind == 'it'), None)
    if control is not None:
        beaten = sum(row.recall > control.recall for row in rows if row.kind == 'dt')
        logger.info("IT-RNN control recall %.4f; %d of %d DT cells beat it",
                    control.recall, beaten, len(rows) - 1)
    return rows


@dataclass
class FoldStudyResult:
    """Recall per fold (rows) and config (columns) with the resulting selections."""
    labels: List[str]
    recall: List[List[float]]
    mrr: List[List[float]] = field(default_factory=list)
    averages: Dict[str, float] = field(default_factory=dict)
    winner: str = ''
    fold_winners: List[str] = field(default_factory=list)

    @property
    def last_fold_winner(self) -> str:
        """The pick a single validation day (the latest) would make."""
        return self.fold_winners[-1]

    @property
    def disagreeing_folds(self) -> List[int]:
        return [i for i, w in enumerate(self.fold_winners) if w != self.winner]

    def to_dict(self) -> Dict[str, Any]:
        return {'labels': self.labels, 'recall': self.recall, 'mrr': self.mrr,
                'averages': self.averages, 'winner': self.winner,
                'fold_winners': self.fold_winners, 'last_fold_winner': self.last_fold_winner}


def _pick(labels: Sequence[str], scores: Sequence[float]) -> str:
    """Highest score; ties go to the earlier label."""
    return labels[int(np.argmax(np.asarray(scores)))]


def summarize_folds(labels: Sequence[str], recall: Sequence[Sequence[float]],
                    mrr: Optional[Sequence[Sequence[float]]] = None) -> FoldStudyResult:
    """Fold averages, the average winner and the per-fold winners of a recall matrix."""
    if not recall:
        raise EmptyInputError("no folds to summarize")
    for i, row in enumerate(recall):
        if len(row) != len(labels):
            raise ValueError(f"fold {i} has {len(row)} values for {len(labels)} configs")
    averages = {label: fold_average([row[j] for row in recall]) for j, label in enumerate(labels)}
    return FoldStudyResult(
        labels=list(labels),
        recall=[list(row) for row in recall],
        mrr=[list(row) for row in (mrr or [])],
        averages=averages,
        winner=_pick(labels, [averages[label] for label in labels]),
        fold_winners=[_pick(labels, row) for row in recall],
    )


def fold_study(specs: Sequence[ModelSpec], folds: Sequence[Tuple[List[Session], List[Session]]],
               train_config: TrainConfig, eval_config: Optional[EvalConfig] = None,
               preprocess: Optional[PreprocessConfig] = None, workers: int = 1) -> FoldStudyResult:
    """Train every config on every fold and select by the average validation Recall@K."""
    preprocess = preprocess or PreprocessConfig()
    labels = [spec.label for spec in specs]
    if len(set(labels)) != len(labels):
        raise ValueError(f"model labels must be unique, got {labels}")
    prepared = [prepare_split(train, val, preprocess.dwell_cap, preprocess.augment_train,
                              preprocess.augment_eval) for train, val in folds]

    def job(fold: int, spec: ModelSpec) -> Callable[[], FitResult]:
        return lambda: fit_and_select(spec, prepared[fold], train_config, eval_config)

    jobs = [job(f, spec) for f in range(len(folds)) for spec in specs]
    fits = _run_jobs(jobs, workers)
    width = len(specs)
    recall = [[fit.best.recall for fit in fits[f * width:(f + 1) * width]] for f in range(len(folds))]
    mrr = [[fit.best.mrr for fit in fits[f * width:(f + 1) * width]] for f in range(len(folds))]
    result = summarize_folds(labels, recall, mrr)
    logger.info("fold study: average winner %s, last-fold winner %s, %d disagreeing folds",
                result.winner, result.last_fold_winner, len(result.disagreeing_folds))
    return result


def representation_study(prepared: PreparedSplit, train_config: TrainConfig,
                         base_spec: Optional[ModelSpec] = None,
                         eval_config: Optional[EvalConfig] = None,
                         workers: int = 1) -> Dict[str, Dict[str, float]]:
    """
    IT-RNN with embedded versus one-hot items, trained with and without prefix
    augmentation; every cell is scored on the same (augmented) test examples.
    """
    base_spec = base_spec or ModelSpec(kind='it')
    full_prefix_only = build_examples(prepared.train_sessions, prepared.vocab, augmented=False)
    cells = [(encoding, augmented) for augmented in (True, False) for encoding in ('onehot', 'embedding')]

    def job(encoding: str, augmented: bool) -> Callable[[], FitResult]:
        spec = base_spec.with_sizes(kind='it', item_encoding=encoding)
        examples = prepared.train_examples if augmented else full_prefix_only
        return lambda: fit_and_select(spec, prepared, train_config, eval_config, examples)

    fits = _run_jobs([job(*cell) for cell in cells], workers)
    table: Dict[str, Dict[str, float]] = {}
    for (encoding, augmented), fit in zip(cells, fits):
        row = 'with_augmentation' if augmented else 'without_augmentation'
        table.setdefault(row, {})[encoding] = fit.best.recall
        table[row][f'{encoding}_mrr'] = fit.best.mrr
    return table


@dataclass
class SignalRun:
    """IT-RNN versus DT-RNN on one synthetic corpus."""
    seed: int
    signal: float
    it_recall: float
    it_mrr: float
    dt_recall: float
    dt_mrr: float
    wilcoxon: WilcoxonResult
    n_examples: int

    @property
    def recall_gain(self) -> float:
        return self.dt_recall - self.it_recall

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data['recall_gain'] = self.recall_gain
        return data


def compare_reports(a: EvalReport, b: EvalReport) -> WilcoxonResult:
    """Paired test on per-example reciprocal ranks; the reports must cover the same examples."""
    if [row[:2] for row in a.rows] != [row[:2] for row in b.rows]:
        raise ValueError("reports are not paired: their (session, target) rows differ")
    return wilcoxon_signed_rank(a.reciprocal_ranks(), b.reciprocal_ranks())


def dwell_signal_study(synth: SynthSpec, seeds: Sequence[int], signals: Sequence[float],
                       it_spec: ModelSpec, dt_spec: ModelSpec, train_config: TrainConfig,
                       eval_config: Optional[EvalConfig] = None,
                       preprocess: Optional[PreprocessConfig] = None) -> List[SignalRun]:
    """For every (signal, seed): generate a corpus, train both models, test the paired difference."""
    preprocess = preprocess or PreprocessConfig()
    runs = []
    for signal in signals:
        for seed in seeds:
            spec = SynthSpec(**{**asdict(synth), 'seed': seed, 'signal': signal, 'daily_signal': None})
            sessions = ClickstreamGenerator(spec).generate_sessions()
            _, prepared = prepare_corpus(sessions, preprocess)
            config = TrainConfig(**{**asdict(train_config), 'seed': seed})
            it_fit = fit_and_select(it_spec, prepared, config, eval_config)
            dt_fit = fit_and_select(dt_spec, prepared, config, eval_config)
            test = compare_reports(dt_fit.best, it_fit.best)
            run = SignalRun(seed, signal, it_fit.best.recall, it_fit.best.mrr,
                            dt_fit.best.recall, dt_fit.best.mrr, test, dt_fit.best.n)
            logger.info("signal %.2f seed %d: recall gain %+.4f, p=%.3g", signal, seed,
                        run.recall_gain, test.p_two_sided)
            runs.append(run)
    return runs


def write_json(path: str, data: Any):
    """Sorted keys, two-space indent, trailing newline: byte-stable for equal data."""
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        json.dump(data, f, indent=2, sort_keys=True)
        f.write('\n')


def _spec_from_dict(data: Dict[str, Any]) -> ModelSpec:
    return ModelSpec(**data)


def _load_sessions(config: Dict[str, Any], output_dir: str,
                   manifest: Dict[str, Any]) -> Tuple[List[Session], Optional[SynthSpec]]:
    """Sessions from the configured click file, or a freshly generated synthetic corpus."""
    strict = config['preprocess']['strict']
    if config['input']:
        path = config['input']
        digest = digest_file(path)
        if digest is None:
            raise ConfigError("input file not found", path, 'input')
        loader = ClickLoader(strict=strict)
        sessions = build_sessions(loader.load(path))
        manifest['inputs'][path] = digest
        manifest['skipped_lines'] = loader.skipped_lines
        return sessions, None
    synth = dict(config['synth'])
    if synth['seed'] is None:
        synth['seed'] = config['seed']
    spec = SynthSpec(**synth)
    sessions = ClickstreamGenerator(spec).generate_sessions()
    path = os.path.join(output_dir, 'clicks.csv')
    with open(path, 'wb') as f:
        f.write(serialize_clicks([c for s in sessions for c in s.clicks]))
    manifest['generated']['clicks.csv'] = digest_file(path)
    manifest['seeds']['synth'] = spec.seed
    return sessions, spec


def run_experiment(config: Dict[str, Any], output_dir: str, config_path: Optional[str] = None,
                   verbose: bool = False) -> Dict[str, Any]:
    """
    Execute the configured pipeline and write its artifacts to output_dir.

    Always written: aggregate.json (metrics only, byte-identical for the same
    config and seed), manifest.json (config, seeds, input digests, outputs) and
    run.log. Returns the aggregate.
    """
    os.makedirs(output_dir, exist_ok=True)
    handler = logging.FileHandler(os.path.join(output_dir, 'run.log'), mode='w', encoding='utf-8')
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    root = logging.getLogger()
    root.addHandler(handler)
    try:
        return _run_pipeline(config, output_dir, config_path, verbose)
    finally:
        root.removeHandler(handler)
        handler.close()


def _run_pipeline(config: Dict[str, Any], output_dir: str, config_path: Optional[str],
                  verbose: bool) -> Dict[str, Any]:
    pipeline = config['pipeline']
    seed = config['seed']
    manifest: Dict[str, Any] = {'pipeline': pipeline, 'config': config, 'inputs': {},
                                'generated': {}, 'seeds': {'base': seed, 'train': seed}, 'outputs': []}
    if config_path:
        manifest['inputs'][config_path] = digest_file(config_path)
    logger.info("running pipeline %s into %s", pipeline, output_dir)

    preprocess = PreprocessConfig(**config['preprocess'])
    train_config = TrainConfig(**config['train'], seed=seed)
    eval_config = EvalConfig(**config['eval'])
    model_spec = ModelSpec(**config['model'])
    aggregate: Dict[str, Any] = {'pipeline': pipeline, 'seed': seed}
    outputs = manifest['outputs']

    def out(name: str) -> str:
        outputs.append(name)
        return os.path.join(output_dir, name)

    if pipeline == 'dwell_signal':
        synth = dict(config['synth'])
        synth['seed'] = seed if synth['seed'] is None else synth['seed']
        study = config['study']
        it_spec = model_spec.with_sizes(kind='it')
        dt_spec = model_spec.with_sizes(kind='dt')
        runs = dwell_signal_study(SynthSpec(**synth), study['seeds'], study['signals'], it_spec,
                                  dt_spec, train_config, eval_config, preprocess)
        manifest['seeds']['study'] = list(study['seeds'])
        aggregate['runs'] = [run.to_dict() for run in runs]
        aggregate[f"bayes_optimal_recall_at_{eval_config.k}"] = {
            str(signal): dict(zip(('with_dwell', 'dwell_blind'), bayes_optimal_recall_at_k(
                SynthSpec(**{**synth, 'signal': signal, 'daily_signal': None}), eval_config.k)))
            for signal in study['signals']}
        return _finish(aggregate, manifest, output_dir, out)

    sessions, synth_spec = _load_sessions(config, output_dir, manifest)
    aggregate['corpus'] = corpus_stats(sessions)
    table = dwell_histogram(sessions, preprocess.dwell_cap)
    write_histogram_csv(table, out('dwell_histogram.csv'))

    if pipeline == 'synth':
        if synth_spec is None:
            raise ConfigError("the synth pipeline generates its own clicks; unset input",
                              config_path, 'input')
        with_dwell, blind = bayes_optimal_recall_at_1(synth_spec)
        aggregate['bayes_optimal_recall_at_1'] = {'with_dwell': with_dwell, 'dwell_blind': blind}
        with_dwell, blind = bayes_optimal_recall_at_k(synth_spec, eval_config.k)
        aggregate[f"bayes_optimal_recall_at_{eval_config.k}"] = {'with_dwell': with_dwell,
                                                               'dwell_blind': blind}
        aggregate['dwell_transition_mutual_information'] = \
            dwell_transition_mutual_information(sessions, synth_spec)
        outputs.append('clicks.csv')
        return _finish(aggregate, manifest, output_dir, out)

    split, prepared = prepare_corpus(sessions, preprocess)
    prepared.vocab.save(out('vocab.txt'))
    aggregate['split'] = {'boundary_day': split.boundary_day.isoformat(),
                          'train_sessions': len(prepared.train_sessions),
                          'test_sessions': len(prepared.eval_sessions),
                          'train_examples': len(prepared.train_examples),
                          'test_examples': len(prepared.eval_examples),
                          'train': corpus_stats(prepared.train_sessions),
                          'test': corpus_stats(prepared.eval_sessions)}

    if pipeline == 'train_eval':
        fit = fit_and_select(model_spec, prepared, train_config, eval_config,
                             checkpoint_dir=out('checkpoints'), verbose=verbose)
        fit.log.to_csv(out('train_log.csv'))
        fit.best.write_csv(out('eval_report.csv'))
        aggregate['model'] = model_spec.label
        aggregate['num_parameters'] = fit.num_parameters
        aggregate['epochs'] = [report.aggregate() for report in fit.reports]
        aggregate['best'] = fit.best.aggregate()
        aggregate['train_losses'] = fit.log.losses

    elif pipeline == 'grid':
        val_train, val = make_folds(prepared.train_sessions, 1)[0]
        grid = GridSpec(config['grid']['dt_em_sizes'], config['grid']['dt_rnn_sizes'])
        rows = grid_search(grid, val_train, val, train_config, model_spec, eval_config,
                           preprocess, config['grid']['workers'], config['grid']['control'])
        aggregate['grid'] = [asdict(row) for row in rows]

    elif pipeline == 'folds':
        specs = [_spec_from_dict(m) for m in config['models']] or [
            model_spec.with_sizes(kind='dt', dt_em_size=16), model_spec.with_sizes(kind='dt', dt_em_size=32)]
        folds = make_folds(prepared.train_sessions, config['folds']['n'])
        result = fold_study(specs, folds, train_config, eval_config, preprocess,
                            config['folds']['workers'])
        tests = [fit_and_select(spec, prepared, train_config, eval_config) for spec in specs]
        aggregate['folds'] = result.to_dict()
        aggregate['test_recall'] = {fit.spec.label: fit.best.recall for fit in tests}
        aggregate['test_mrr'] = {fit.spec.label: fit.best.mrr for fit in tests}

    elif pipeline == 'representation':
        aggregate['representation'] = representation_study(prepared, train_config, model_spec,
                                                            eval_config)

    return _finish(aggregate, manifest, output_dir, out)


def _finish(aggregate: Dict[str, Any], manifest: Dict[str, Any], output_dir: str,
            out: Callable[[str], str]) -> Dict[str, Any]:
    write_json(out('aggregate.json'), aggregate)
    manifest['outputs'].append('manifest.json')
    manifest['outputs'].append('run.log')
    write_json(os.path.join(output_dir, 'manifest.json'), manifest)
    logger.info("wrote %d artifacts to %s", len(manifest['outputs']), output_dir)
    return aggregate

