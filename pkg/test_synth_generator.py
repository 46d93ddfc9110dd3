"""
Synthetic Generator Tests
"""
from datetime import date

import pytest

from click_loader import build_sessions, parse_clicks
from preprocess import filter_dataset, session_day
from synth_generator import (ClickstreamGenerator, SynthSpec, SynthSpecError,
                             bayes_optimal_recall_at_1, bayes_optimal_recall_at_k,
                             dwell_transition_mutual_information,
                             synth_generate)


def small_spec(**changes):
    values = dict(num_items=40, num_sessions=600, days=3, seed=11)
    values.update(changes)
    return SynthSpec(**values)


def gaps_and_moves(sessions, num_items):
    for s in sessions:
        for a, b in zip(s.clicks, s.clicks[1:]):
            yield b.timestamp_ms - a.timestamp_ms, b.item_id == a.item_id % num_items + 1


def test_generation_is_deterministic_per_seed():
    assert synth_generate(small_spec()) == synth_generate(small_spec())
    assert synth_generate(small_spec()) != synth_generate(small_spec(seed=12))


def test_output_parses_without_loss():
    spec = small_spec()
    sessions = build_sessions(parse_clicks(synth_generate(spec)))
    assert len(sessions) == spec.num_sessions
    assert [s.session_id for s in sessions] == list(range(1, spec.num_sessions + 1))
    assert all(2 <= len(s) <= 10 for s in sessions)
    assert all(1 <= item <= spec.num_items for s in sessions for item in s.items)
    assert len(filter_dataset(sessions, min_support=1)) == len(sessions)


def test_sessions_stay_within_their_day():
    sessions = ClickstreamGenerator(small_spec()).generate_sessions()
    days = set()
    for s in sessions:
        start_day = session_day(s.with_clicks(s.clicks[:1]))
        assert start_day == session_day(s)
        days.add(start_day)
    assert days == {date(2014, 4, 1), date(2014, 4, 2), date(2014, 4, 3)}


def test_full_signal_follows_successor_with_long_dwell():
    spec = small_spec(signal=1.0)
    for gap, follows in gaps_and_moves(ClickstreamGenerator(spec).generate_sessions(), spec.num_items):
        assert follows and 30_000 <= gap <= 40_000


def test_zero_signal_skips_with_short_dwell():
    spec = small_spec(signal=0.0)
    generator = ClickstreamGenerator(spec)
    for item, pool in generator.skip_pools.items():
        assert len(pool) == spec.branching
        assert item not in pool and generator.successor(item) not in pool
    for gap, follows in gaps_and_moves(generator.generate_sessions(), spec.num_items):
        assert not follows and 1_000 <= gap <= 5_000


def test_mutual_information():
    zero = small_spec(signal=0.0)
    assert dwell_transition_mutual_information(
        ClickstreamGenerator(zero).generate_sessions(), zero) == pytest.approx(0.0, abs=1e-12)
    strong = small_spec(signal=0.9)
    info = dwell_transition_mutual_information(ClickstreamGenerator(strong).generate_sessions(), strong)
    assert 0.3 < info < 0.6, "dwell class determines the move, so the information is H(0.9) ~ 0.47 bits"


def test_bayes_optimal_recall():
    with_dwell, blind = bayes_optimal_recall_at_1(SynthSpec(signal=0.9, branching=4))
    assert with_dwell == pytest.approx(0.925)
    assert blind == pytest.approx(0.9)
    with_dwell, blind = bayes_optimal_recall_at_1(SynthSpec(signal=0.0, branching=4))
    assert with_dwell == pytest.approx(0.25) and blind == pytest.approx(0.25)


def test_bayes_optimal_recall_at_20_leaves_dwell_little_room():
    with_dwell, blind = bayes_optimal_recall_at_k(SynthSpec(), 20)
    assert with_dwell == pytest.approx(1.0) and blind == pytest.approx(1.0), \
        "successor plus four skip items all fit in the top 20"
    for branching in range(2, 80):
        with_dwell, blind = bayes_optimal_recall_at_k(SynthSpec(num_items=100, branching=branching), 20)
        assert -1e-12 <= with_dwell - blind <= 0.1 / 20 + 1e-12, branching
    with_dwell, blind = bayes_optimal_recall_at_k(SynthSpec(num_items=100, branching=40), 20)
    assert with_dwell == pytest.approx(0.9 + 0.1 * 20 / 40)
    assert blind == pytest.approx(0.9 + 0.1 * 19 / 40)
    assert bayes_optimal_recall_at_k(SynthSpec(), 1) == bayes_optimal_recall_at_1(SynthSpec())
    with pytest.raises(ValueError):
        bayes_optimal_recall_at_k(SynthSpec(), 0)


def test_daily_signal_varies_by_day():
    spec = small_spec(days=2, daily_signal=[1.0, 0.0])
    for s in ClickstreamGenerator(spec).generate_sessions():
        on_first_day = session_day(s) == date(2014, 4, 1)
        for _, follows in gaps_and_moves([s], spec.num_items):
            assert follows == on_first_day


@pytest.mark.parametrize('changes', [
    dict(branching=1),
    dict(num_items=5, branching=4),
    dict(signal=1.5),
    dict(dwell_short=(1.0, 35.0)),
    dict(daily_signal=[0.5]),
    dict(session_length=(1, 5)),
    dict(session_length=(2, 17)),
    dict(start_date='April'),
])
def test_invalid_specs(changes):
    with pytest.raises(SynthSpecError):
        small_spec(**changes)
