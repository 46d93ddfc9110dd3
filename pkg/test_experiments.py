"""
Experiment Driver Tests
Grid search, fold study, representation and dwell-signal studies at micro
scale, the config layer and the end-to-end pipeline.
"""
import json
import os

import pytest

from evaluation import fold_average
from experiment_config import (ConfigError, apply_overrides, build_config, load_config,
                               parse_overrides, parse_value)
from experiments import (EvalConfig, GridSpec, ModelSpec, dwell_signal_study, fit_and_select,
                         fold_study, grid_search, representation_study, run_experiment,
                         summarize_folds)
from main import main
from model import DtRnnConfig, ItRnnConfig
from preprocess import PreprocessConfig, make_folds, prepare_corpus, prepare_split
from synth_generator import ClickstreamGenerator, SynthSpec
from trainer import TrainConfig

HERE = os.path.dirname(os.path.abspath(__file__))
SMOKE_CONFIG = os.path.join(HERE, 'configs', 'smoke.json')

SIX_DAY_RECALL = [
    [0.636482, 0.639205],
    [0.629568, 0.631944],
    [0.661093, 0.665537],
    [0.673821, 0.673638],
    [0.684637, 0.688529],
    [0.666146, 0.663411],
]

MICRO = ModelSpec(item_em_size=4, it_rnn_size=4, dt_em_size=2, dt_rnn_size=2)
QUICK = TrainConfig(epochs=1, batch_size=64, seed=3)


@pytest.fixture(scope='module')
def corpus():
    spec = SynthSpec(num_items=20, num_sessions=240, days=4, seed=1, branching=3)
    sessions = ClickstreamGenerator(spec).generate_sessions()
    split, prepared = prepare_corpus(sessions, PreprocessConfig())
    return split, prepared


def test_grid_spec_and_model_spec():
    assert GridSpec().cells()[:2] == [(4, 4), (4, 8)]
    assert len(GridSpec().cells()) == 24
    with pytest.raises(ValueError):
        GridSpec(dt_em_sizes=[])
    with pytest.raises(ValueError):
        GridSpec(dt_rnn_sizes=[0])
    assert MICRO.label == 'dt_em2_rnn2'
    assert ModelSpec(kind='it', item_encoding='onehot').label == 'it_onehot'
    assert MICRO.with_sizes(dt_em_size=8).label == 'dt_em8_rnn2'
    config = MICRO.build_config(20, 3601)
    assert isinstance(config, DtRnnConfig) and config.base.num_items == 20
    assert isinstance(MICRO.with_sizes(kind='it').build_config(20, 3601), ItRnnConfig)
    with pytest.raises(ValueError):
        ModelSpec(kind='xl')


def test_fold_summary_of_six_day_recall():
    result = summarize_folds(['dt_em16', 'dt_em32'], SIX_DAY_RECALL)
    assert result.averages['dt_em32'] == pytest.approx(0.660377333, abs=5e-6)
    assert result.averages['dt_em16'] == pytest.approx(0.6586245, abs=5e-6)
    assert result.winner == 'dt_em32'
    assert result.last_fold_winner == 'dt_em16', "a single validation day picks the other config"
    assert result.disagreeing_folds == [3, 5]


def test_fold_summary_constant_and_errors():
    result = summarize_folds(['a', 'b'], [[0.3, 0.2]] * 4)
    assert result.averages == {'a': pytest.approx(0.3), 'b': pytest.approx(0.2)}
    assert result.fold_winners == ['a'] * 4
    with pytest.raises(ValueError):
        summarize_folds(['a', 'b'], [[0.3]])


def test_fit_and_select_reports_every_epoch(corpus):
    _, prepared = corpus
    fit = fit_and_select(MICRO, prepared, TrainConfig(epochs=2, batch_size=64), EvalConfig(k=5))
    assert [r.epoch for r in fit.reports] == [1, 2]
    assert fit.best.recall == max(r.recall for r in fit.reports)
    assert fit.best.k == 5 and fit.best.n == len(prepared.eval_examples)
    assert len(fit.log) == 2


def test_grid_search_ranked_reproducible_and_order_independent(corpus):
    split, _ = corpus
    train, val = make_folds(split.train, 1)[0]
    grid = GridSpec([2, 3], [2, 4])
    rows = grid_search(grid, train, val, QUICK, MICRO)
    assert len(rows) == 4
    keys = [(-r.recall, -r.mrr, r.num_parameters) for r in rows]
    assert keys == sorted(keys)

    reversed_rows = grid_search(GridSpec([3, 2], [4, 2]), train, val, QUICK, MICRO, workers=2)
    assert reversed_rows == rows

    winner = rows[0]
    prepared = prepare_split(train, val)
    alone = fit_and_select(MICRO.with_sizes(dt_em_size=winner.dt_em_size, dt_rnn_size=winner.dt_rnn_size),
                           prepared, QUICK)
    assert (alone.best.recall, alone.best.mrr) == (winner.recall, winner.mrr)


def test_grid_search_dt_cell_beats_item_only_control():
    # long dwell -> successor, short dwell -> one of two skip items: recall@1 0.75 with dwell, 0.5 without
    spec = SynthSpec(num_items=10, num_sessions=900, days=3, seed=4, signal=0.5, branching=2)
    train, val = make_folds(ClickstreamGenerator(spec).generate_sessions(), 1)[0]
    model = ModelSpec(item_em_size=8, it_rnn_size=16, dt_em_size=4, dt_rnn_size=4)
    config = TrainConfig(epochs=8, batch_size=32, lr=0.01, seed=0)
    rows = grid_search(GridSpec([4], [4]), train, val, config, model, EvalConfig(k=1), with_control=True)
    assert [row.kind for row in rows].count('it') == 1 and len(rows) == 2
    control = next(row for row in rows if row.kind == 'it')
    assert (control.dt_em_size, control.dt_rnn_size, control.label) == (0, 0, 'it_control')
    assert rows[0].kind == 'dt', f"control won: {rows}"
    assert rows[0].recall > control.recall + 0.05


def test_grid_search_rejects_empty_splits(corpus):
    split, _ = corpus
    with pytest.raises(ValueError):
        grid_search(GridSpec([2], [2]), split.train, [], QUICK, MICRO)


def test_fold_study_matrix_and_averages(corpus):
    split, _ = corpus
    folds = make_folds(split.train, 2)
    specs = [MICRO, MICRO.with_sizes(dt_em_size=3)]
    result = fold_study(specs, folds, QUICK)
    assert len(result.recall) == 2 and all(len(row) == 2 for row in result.recall)
    for j, label in enumerate(result.labels):
        assert result.averages[label] == fold_average([row[j] for row in result.recall])
    assert result.winner == max(result.labels, key=lambda label: (result.averages[label],
                                                                  -result.labels.index(label)))
    alone = fit_and_select(specs[1], prepare_split(*folds[0]), QUICK)
    assert result.recall[0][1] == alone.best.recall
    with pytest.raises(ValueError):
        fold_study([MICRO, MICRO], folds, QUICK)


def test_representation_study_table(corpus):
    _, prepared = corpus
    table = representation_study(prepared, QUICK, ModelSpec(kind='it', item_em_size=4, it_rnn_size=4))
    assert set(table) == {'with_augmentation', 'without_augmentation'}
    for row in table.values():
        assert set(row) == {'onehot', 'embedding', 'onehot_mrr', 'embedding_mrr'}
        assert all(0.0 <= v <= 1.0 for v in row.values())


def test_dwell_signal_study_micro():
    synth = SynthSpec(num_items=20, num_sessions=200, days=3, branching=3)
    runs = dwell_signal_study(synth, [0], [0.9], MICRO.with_sizes(kind='it'), MICRO, QUICK)
    assert len(runs) == 1
    run = runs[0]
    assert run.seed == 0 and run.signal == 0.9
    assert run.recall_gain == run.dt_recall - run.it_recall
    assert 0.0 <= run.wilcoxon.p_two_sided <= 1.0
    assert run.to_dict()['wilcoxon']['method'] in ('exact', 'normal-approximation')


def test_config_defaults_and_overrides():
    config = build_config()
    assert config['train']['epochs'] == 6 and config['eval']['k'] == 20
    assert config['grid']['dt_em_sizes'] == [4, 8, 16, 32]
    overrides = parse_overrides(['--train.epochs=2', '--input=clicks.csv', '--synth.dwell_long=[20,30]'])
    assert overrides == [('train.epochs', 2), ('input', 'clicks.csv'), ('synth.dwell_long', [20, 30])]
    updated = apply_overrides(config, overrides)
    assert updated['train']['epochs'] == 2 and updated['input'] == 'clicks.csv'
    assert config['train']['epochs'] == 6, "overrides must not mutate the original"
    assert parse_value('true') is True and parse_value('abc') == 'abc'


def test_config_errors_name_path_and_key(tmp_path):
    with pytest.raises(ConfigError, match="train.epoch"):
        apply_overrides(build_config(), [('train.epoch', 3)])
    with pytest.raises(ConfigError) as info:
        build_config({'pipeline': 'everything'}, 'x.json')
    assert info.value.key == 'pipeline' and info.value.path == 'x.json'
    bad = tmp_path / 'bad.json'
    bad.write_text('{"train": ')
    with pytest.raises(ConfigError, match="bad.json"):
        load_config(str(bad))
    with pytest.raises(ConfigError):
        load_config(str(tmp_path / 'missing.json'))
    with pytest.raises(ConfigError):
        parse_overrides(['train.epochs=3'])


def test_run_experiment_is_byte_deterministic(tmp_path):
    config = load_config(SMOKE_CONFIG)
    first = tmp_path / 'a'
    second = tmp_path / 'b'
    aggregate = run_experiment(config, str(first), SMOKE_CONFIG)
    run_experiment(config, str(second), SMOKE_CONFIG)
    assert (first / 'aggregate.json').read_bytes() == (second / 'aggregate.json').read_bytes()
    assert aggregate['best']['epoch'] in (1, 2)
    manifest = json.loads((first / 'manifest.json').read_text())
    assert manifest['seeds']['base'] == 7
    assert manifest['inputs'][SMOKE_CONFIG]
    assert manifest['generated']['clicks.csv']
    for name in ('vocab.txt', 'train_log.csv', 'eval_report.csv', 'dwell_histogram.csv', 'run.log',
                 'checkpoints/epoch_1.ckpt', 'checkpoints/epoch_2.ckpt'):
        assert (first / name).exists(), name


def test_run_experiment_records_input_digest(tmp_path):
    config = load_config(SMOKE_CONFIG)
    run_experiment(config, str(tmp_path / 'gen'))
    clicks = str(tmp_path / 'gen' / 'clicks.csv')
    config = apply_overrides(config, [('input', clicks), ('pipeline', 'synth')])
    with pytest.raises(ConfigError):
        run_experiment(config, str(tmp_path / 'synth'))
    config = apply_overrides(config, [('pipeline', 'train_eval')])
    run_experiment(config, str(tmp_path / 'again'))
    manifest = json.loads((tmp_path / 'again' / 'manifest.json').read_text())
    assert manifest['inputs'][clicks] == manifest_digest(tmp_path / 'gen')
    missing = apply_overrides(config, [('input', str(tmp_path / 'nope.csv'))])
    with pytest.raises(ConfigError, match="input"):
        run_experiment(missing, str(tmp_path / 'missing'))


def manifest_digest(run_dir):
    return json.loads((run_dir / 'manifest.json').read_text())['generated']['clicks.csv']


def test_cli_synth_and_error_line(tmp_path, capsys):
    out = str(tmp_path / 'clicks.csv')
    assert main(['--seed', '5', 'synth', '--output', out, '--synth.num_sessions=50',
                 '--synth.num_items=20']) == 0
    assert len(open(out).read().splitlines()) >= 100
    assert main(['ingest', out]) == 0
    assert json.loads(capsys.readouterr().out.splitlines()[-1])['sessions'] == 50

    assert main(['ingest', str(tmp_path / 'absent.csv')]) == 1
    err = capsys.readouterr().err.strip().splitlines()[-1]
    assert err.startswith('error ')
    assert json.loads(err[len('error '):])['type'] == 'FileNotFoundError'


def test_cli_seed_before_or_after_subcommand(tmp_path):
    small = ['--synth.num_sessions=30', '--synth.num_items=20']
    paths = {name: tmp_path / f'{name}.csv' for name in ('before', 'after', 'other', 'both')}
    assert main(['--seed', '5', 'synth', '--output', str(paths['before'])] + small) == 0
    assert main(['synth', '--output', str(paths['after']), '--seed', '5'] + small) == 0
    assert main(['synth', '--seed', '6', '--output', str(paths['other'])] + small) == 0
    assert main(['--seed', '6', 'synth', '--seed', '5', '--output', str(paths['both'])] + small) == 0
    assert paths['after'].read_bytes() == paths['before'].read_bytes()
    assert paths['both'].read_bytes() == paths['before'].read_bytes(), "the later --seed wins"
    assert paths['other'].read_bytes() != paths['before'].read_bytes()


def test_cli_rejects_malformed_lines_unless_lenient(tmp_path, capsys):
    path = tmp_path / 'clicks.csv'
    path.write_bytes(b"1,2014-04-07T10:51:09.277Z,5,0\n"
                     b"1,notadate,6,0\n"
                     b"1,2014-04-07T10:51:20.000Z,7,0\n")
    assert main(['ingest', str(path)]) == 1
    err = capsys.readouterr().err.strip().splitlines()[-1]
    assert json.loads(err[len('error '):])['type'] == 'ClickParseError'
    assert main(['ingest', str(path), '--preprocess.strict=false']) == 0
    assert json.loads(capsys.readouterr().out.splitlines()[-1])['sessions'] == 1


def test_cli_preprocess_train_eval_compare(tmp_path, capsys):
    clicks = str(tmp_path / 'clicks.csv')
    data = str(tmp_path / 'data')
    ckpt = str(tmp_path / 'ckpt')
    overrides = ['--synth.num_sessions=200', '--synth.num_items=20', '--synth.days=3']
    assert main(['synth', '--output', clicks] + overrides) == 0
    assert main(['preprocess', clicks, '--out-dir', data]) == 0
    assert os.path.exists(os.path.join(data, 'train_examples.tsv'))
    sizes = ['--model.item_em_size=4', '--model.it_rnn_size=4', '--model.dt_em_size=2',
             '--model.dt_rnn_size=2', '--train.epochs=1']
    assert main(['train', '--data-dir', data, '--checkpoint-dir', ckpt] + sizes) == 0
    report_a = str(tmp_path / 'a.csv')
    report_b = str(tmp_path / 'b.csv')
    checkpoint = os.path.join(ckpt, 'epoch_1.ckpt')
    assert main(['eval', '--data-dir', data, '--checkpoint', checkpoint, '--output', report_a]) == 0
    assert main(['eval', '--data-dir', data, '--checkpoint', checkpoint, '--output', report_b,
                 '--eval.k=5']) == 0
    capsys.readouterr()
    assert main(['compare', report_a, report_b]) == 0
    result = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert result['n_effective'] == 0 and result['p_two_sided'] == 1.0
    assert main(['histogram', clicks, '--output', str(tmp_path / 'hist.csv'),
                 '--png', str(tmp_path / 'hist.png')]) == 0
    assert (tmp_path / 'hist.png').stat().st_size > 0
