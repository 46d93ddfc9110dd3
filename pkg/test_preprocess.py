"""
Preprocess Tests
Filtering on a hand-counted fixture, temporal splits, folds, dwell buckets and
prefix augmentation.
"""
import random
from datetime import date, datetime, timezone
from decimal import ROUND_HALF_UP, Decimal

import pytest

from click_loader import EPOCH, ONE_MS, Click, Session, VocabError, build_vocab
from preprocess import (DegenerateSplitError, Example, InsufficientDaysError, OrderingError,
                        PreprocessConfig, augment, build_examples, compute_dwell, corpus_stats,
                        dwell_histogram, filter_dataset, filter_unseen, fold_days, make_folds,
                        prepare_corpus, read_examples, session_day, temporal_split,
                        write_examples, write_histogram_csv)
from synth_generator import ClickstreamGenerator, SynthSpec

DAY_MS = 86_400_000
APRIL_1 = (datetime(2014, 4, 1, tzinfo=timezone.utc) - EPOCH) // ONE_MS


def make_session(sid, items, start_ms=APRIL_1, gaps_ms=None):
    gaps_ms = gaps_ms or [10_000] * (len(items) - 1)
    t = start_ms
    clicks = [Click(sid, t, items[0])]
    for item, gap in zip(items[1:], gaps_ms):
        t += gap
        clicks.append(Click(sid, t, item))
    return Session(sid, clicks)


# Item supports after dropping single-click sessions:
# 1:17 2:16 3:9 4:4 5:5 6:4 7:18 8:2 9:3, so items 4, 6, 8 and 9 are removed.
FIXTURE = {
    1: [1, 2],
    2: [1, 2, 3],
    3: [1],
    4: [2, 3, 1],
    5: [1, 2, 1],
    6: [3, 3],
    7: [9, 1],
    8: [9, 8],
    9: [7] * 17,
    10: [7, 4],
    11: [2, 4, 3],
    12: [5] * 5,
    13: [6] * 4,
    14: [1, 3, 2, 3],
    15: [2],
    16: [8, 1, 2],
    17: [3, 1],
    18: [1, 2] * 8,
    19: [4, 4],
    20: [2, 9, 3],
}

EXPECTED_AFTER_FILTER = {
    1: [1, 2],
    2: [1, 2, 3],
    4: [2, 3, 1],
    5: [1, 2, 1],
    6: [3, 3],
    11: [2, 3],
    12: [5] * 5,
    14: [1, 3, 2, 3],
    16: [1, 2],
    17: [3, 1],
    18: [1, 2] * 8,
    20: [2, 3],
}


def fixture_sessions():
    return [make_session(sid, items, APRIL_1 + sid * 60_000) for sid, items in FIXTURE.items()]


def days_corpus(n_days, per_day=3):
    sessions = []
    sid = 1
    for day in range(n_days):
        for j in range(per_day):
            sessions.append(make_session(sid, [1, 2, 3], APRIL_1 + day * DAY_MS + j * 3_600_000))
            sid += 1
    return sessions


def test_filter_matches_hand_enumeration():
    result = filter_dataset(fixture_sessions())
    assert {s.session_id: s.items for s in result} == EXPECTED_AFTER_FILTER


def test_filter_rules_individually():
    assert filter_dataset([make_session(1, [1])], min_support=1) == []
    assert filter_dataset([make_session(1, [1] * 17)], min_support=1) == []
    assert len(filter_dataset([make_session(1, [1] * 16)], min_support=1)) == 1


def test_filter_idempotent_on_fixture():
    once = filter_dataset(fixture_sessions())
    twice = filter_dataset(once)
    assert [s.clicks for s in twice] == [s.clicks for s in once]


def test_augmentation_count_on_fixture():
    sessions = filter_dataset(fixture_sessions())
    vocab = build_vocab(sessions)
    examples = build_examples(sessions, vocab)
    assert len(examples) == 34
    assert len(examples) == sum(len(s) - 1 for s in sessions)


def test_session_day_uses_last_click():
    late = APRIL_1 + DAY_MS - 60_000
    s = make_session(1, [1, 2], late, [120_000])
    assert session_day(s) == date(2014, 4, 2)


def test_temporal_split_last_day():
    crossing = make_session(10, [1, 2], APRIL_1 + DAY_MS - 60_000, [120_000])
    earlier = make_session(11, [1, 2], APRIL_1)
    latest = make_session(12, [3, 4], APRIL_1 + DAY_MS + 3_600_000)
    split = temporal_split([earlier, crossing, latest])
    assert split.boundary_day == date(2014, 4, 2)
    assert [s.session_id for s in split.train] == [11]
    assert [s.session_id for s in split.heldout] == [10, 12]


def test_temporal_split_degenerate():
    with pytest.raises(DegenerateSplitError):
        temporal_split([make_session(1, [1, 2]), make_session(2, [2, 3], APRIL_1 + 1000)])
    with pytest.raises(DegenerateSplitError):
        temporal_split([])


def test_make_folds_ten_days():
    sessions = days_corpus(10)
    days = fold_days(sessions, 6)
    assert days == [date(2014, 4, d) for d in range(5, 11)]
    folds = make_folds(sessions, 6)
    assert len(folds) == 6
    val_ids = [s.session_id for _, val in folds for s in val]
    last_six = [s.session_id for s in sessions if session_day(s) >= date(2014, 4, 5)]
    assert sorted(val_ids) == sorted(last_six)
    assert len(val_ids) == len(set(val_ids)), "validation sets must be disjoint"
    for day, (train, val) in zip(days, folds):
        assert len(val) == 3
        assert all(session_day(s) < day for s in train)
        assert len(train) == 3 * (day.day - 1)


def test_make_folds_insufficient_days():
    with pytest.raises(InsufficientDaysError):
        make_folds(days_corpus(6), 6)


def test_filter_unseen_is_click_level():
    eval_sessions = [make_session(1, [5, 99, 6]), make_session(2, [98, 97]), make_session(3, [5, 98])]
    result = filter_unseen(eval_sessions, {5, 6})
    assert [(s.session_id, s.items) for s in result] == [(1, [5, 6])]


def test_compute_dwell_rounding_and_cap():
    s = make_session(1, [1, 2, 3], 0, [12_400, 35_500])
    assert compute_dwell(s) == [12, 36]
    assert compute_dwell(make_session(1, [1, 2], 0, [7_200_000])) == [3600]
    assert compute_dwell(make_session(1, [1, 2], 0, [7_200_000]), cap_seconds=60) == [60]
    assert compute_dwell(make_session(1, [1, 2, 3], 0, [499, 500])) == [0, 1]


def test_compute_dwell_rejects_unsorted():
    s = Session(1, [Click(1, 5000, 1), Click(1, 1000, 2)])
    with pytest.raises(OrderingError):
        compute_dwell(s)


def test_compute_dwell_matches_decimal_oracle():
    rng = random.Random(9)
    for _ in range(200):
        gaps = [rng.randint(0, 5_000_000) for _ in range(rng.randint(1, 15))]
        s = make_session(1, list(range(len(gaps) + 1)), 0, gaps)
        expected = [min(int((Decimal(g) / 1000).quantize(Decimal(1), ROUND_HALF_UP)), 3600) for g in gaps]
        assert compute_dwell(s) == expected


def test_augment_prefixes():
    s = make_session(1, [10, 20, 30, 40, 50], 0, [1000, 2000, 3000, 4000])
    vocab = build_vocab([s])
    examples = augment(s, vocab)
    assert [ex.length for ex in examples] == [1, 2, 3, 4]
    assert examples[2] == Example(1, (0, 1, 2), (1, 2, 3), 3)
    assert examples[-1].input_dwell == (1, 2, 3, 4), "the last dwell uses the target's timestamp"


def test_augment_short_and_non_augmented():
    s = make_session(4, [10, 20], 0, [2600])
    vocab = build_vocab([s])
    assert augment(s, vocab) == [Example(4, (0,), (3,), 1)]
    longer = make_session(5, [10, 20, 10, 20], 0)
    only_full = augment(longer, vocab, augmented=False)
    assert len(only_full) == 1 and only_full[0].length == 3 and only_full[0].target_item == 1


def test_augment_errors():
    vocab = build_vocab([make_session(1, [10, 20])])
    with pytest.raises(VocabError):
        augment(make_session(2, [10, 30]), vocab)
    with pytest.raises(ValueError):
        augment(make_session(3, [10] * 17), vocab)


def test_example_invariants():
    with pytest.raises(ValueError):
        Example(1, (1, 2), (3,), 4)
    with pytest.raises(ValueError):
        Example(1, tuple(range(16)), tuple(range(16)), 4)


def test_dwell_histogram_counts(tmp_path):
    a = make_session(1, [1, 2], 0, [3000])
    b = make_session(2, [1, 2, 3], 0, [3000, 5000])
    table = dwell_histogram([a, b], 3600)
    assert table == [(3, 2), (5, 1)]
    assert sum(c for _, c in table) == (len(a) - 1) + (len(b) - 1)
    path = tmp_path / 'hist.csv'
    write_histogram_csv(table, str(path))
    assert path.read_text() == "bucket,count\n3,2\n5,1\n"


def test_corpus_stats():
    stats = corpus_stats([make_session(1, [1, 2]), make_session(2, [2, 3, 4, 5])])
    assert stats == {'sessions': 2, 'clicks': 6, 'items': 5, 'avg_session_length': 3.0}
    assert corpus_stats([])['avg_session_length'] == 0.0


def test_examples_file_and_vocab_check(tmp_path):
    s = make_session(1, [10, 20, 30])
    vocab = build_vocab([s])
    examples = augment(s, vocab)
    path = tmp_path / 'examples.tsv'
    write_examples(examples, str(path))
    assert read_examples(str(path), vocab) == examples
    path.write_text("1\t0,7\t1,1\t2\n")
    with pytest.raises(ValueError, match="vocabulary"):
        read_examples(str(path), vocab)


def test_prepare_corpus_on_synthetic_days():
    spec = SynthSpec(num_items=30, num_sessions=300, days=4, seed=3)
    sessions = ClickstreamGenerator(spec).generate_sessions()
    split, prepared = prepare_corpus(sessions, PreprocessConfig())
    assert split.boundary_day == date(2014, 4, 4)
    assert all(session_day(s) < split.boundary_day for s in split.train)
    assert len(prepared.train_examples) == sum(len(s) - 1 for s in prepared.train_sessions)
    assert len(prepared.eval_examples) == sum(len(s) - 1 for s in prepared.eval_sessions)
    train_items = set(prepared.vocab.item_to_index)
    assert all(item in train_items for s in prepared.eval_sessions for item in s.items)


def test_preprocess_config_validation():
    with pytest.raises(ValueError):
        PreprocessConfig(min_len=1)
    with pytest.raises(ValueError):
        PreprocessConfig(max_len=17)
