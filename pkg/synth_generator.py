"""
Synth Generator
Synthetic click logs in which the dwell time on an item tells whether the user
follows the item's fixed successor or jumps into its skip pool.
"""
import logging
import math
import random
from collections import Counter
from dataclasses import dataclass
from datetime import date, datetime, timezone
from typing import Dict, List, Optional, Sequence, Tuple

from click_loader import EPOCH, ONE_MS, Click, Session, serialize_clicks

logger = logging.getLogger(__name__)

DAY_MS = 86_400_000


class SynthSpecError(ValueError):
    """Raised for an invalid generator specification."""


@dataclass
class SynthSpec:
    """Generator settings; the defaults echo the short and ~35 s dwell peaks."""
    num_items: int = 200
    num_sessions: int = 20000
    days: int = 8
    signal: float = 0.9
    dwell_short: Tuple[float, float] = (1.0, 5.0)
    dwell_long: Tuple[float, float] = (30.0, 40.0)
    branching: int = 4
    seed: int = 0
    session_length: Tuple[int, int] = (2, 10)
    start_date: str = '2014-04-01'
    daily_signal: Optional[List[float]] = None

    def __post_init__(self):
        self.dwell_short = tuple(self.dwell_short)
        self.dwell_long = tuple(self.dwell_long)
        self.session_length = tuple(self.session_length)
        self.validate()

    def validate(self):
        if self.branching < 2:
            raise SynthSpecError(f"branching must be >= 2, got {self.branching}")
        if self.num_items < self.branching + 2:
            raise SynthSpecError(f"need at least branching + 2 = {self.branching + 2} items, "
                                 f"got {self.num_items}")
        if self.num_sessions < 1 or self.days < 1:
            raise SynthSpecError("num_sessions and days must be positive")
        for name, signal in [('signal', self.signal)] + [
                (f'daily_signal[{i}]', s) for i, s in enumerate(self.daily_signal or [])]:
            if not 0.0 <= signal <= 1.0:
                raise SynthSpecError(f"{name} must lie in [0, 1], got {signal}")
        if self.daily_signal is not None and len(self.daily_signal) != self.days:
            raise SynthSpecError(f"daily_signal needs {self.days} entries, got {len(self.daily_signal)}")
        for name, (lo, hi) in (('dwell_short', self.dwell_short), ('dwell_long', self.dwell_long)):
            if not 0 <= lo <= hi:
                raise SynthSpecError(f"{name} must satisfy 0 <= low <= high, got {(lo, hi)}")
        short, long_ = self.dwell_short, self.dwell_long
        if not (short[1] < long_[0] or long_[1] < short[0]):
            raise SynthSpecError(f"dwell ranges {short} and {long_} overlap")
        lo, hi = self.session_length
        if not 2 <= lo <= hi <= 16:
            raise SynthSpecError(f"session_length must satisfy 2 <= low <= high <= 16, got {(lo, hi)}")
        try:
            date.fromisoformat(self.start_date)
        except ValueError:
            raise SynthSpecError(f"start_date {self.start_date!r} is not YYYY-MM-DD") from None

    def signal_on(self, day_index: int) -> float:
        if self.daily_signal is not None:
            return self.daily_signal[day_index]
        return self.signal


class ClickstreamGenerator:
    """Walks sessions over a successor ring with per-item skip pools."""

    def __init__(self, spec: SynthSpec):
        """Initialize with a spec; all randomness comes from spec.seed."""
        spec.validate()
        self.spec = spec
        self.random = random.Random(spec.seed)
        n = spec.num_items
        self.skip_pools: Dict[int, List[int]] = {}
        for item in range(1, n + 1):
            banned = {item, self.successor(item)}
            candidates = [j for j in range(1, n + 1) if j not in banned]
            self.skip_pools[item] = self.random.sample(candidates, spec.branching)

    def successor(self, item: int) -> int:
        """g(i) = i + 1 wrapping around, items numbered 1..N."""
        return item % self.spec.num_items + 1

    def _dwell_ms(self, long_dwell: bool) -> int:
        lo, hi = self.spec.dwell_long if long_dwell else self.spec.dwell_short
        return self.random.randint(int(round(lo * 1000)), int(round(hi * 1000)))

    def generate_sessions(self) -> List[Session]:
        """Sessions ordered by start time, ids 1..num_sessions."""
        spec = self.spec
        start = datetime.combine(date.fromisoformat(spec.start_date), datetime.min.time(),
                                 tzinfo=timezone.utc)
        origin_ms = (start - EPOCH) // ONE_MS
        plans = []
        for _ in range(spec.num_sessions):
            day_index = self.random.randrange(spec.days)
            # Keep the session inside its day: leave an hour of headroom.
            offset = self.random.randrange(DAY_MS - 3_600_000)
            plans.append((origin_ms + day_index * DAY_MS + offset, day_index))
        plans.sort(key=lambda plan: plan[0])

        sessions = []
        for session_id, (t, day_index) in enumerate(plans, start=1):
            signal = spec.signal_on(day_index)
            length = self.random.randint(*spec.session_length)
            item = self.random.randint(1, spec.num_items)
            clicks = [Click(session_id, t, item, '0')]
            for _ in range(length - 1):
                follow = self.random.random() < signal
                t += self._dwell_ms(long_dwell=follow)
                item = self.successor(item) if follow else self.random.choice(self.skip_pools[item])
                clicks.append(Click(session_id, t, item, '0'))
            sessions.append(Session(session_id, clicks))
        logger.info("generated %d sessions over %d days (signal %s)", len(sessions), spec.days,
                    spec.daily_signal if spec.daily_signal is not None else spec.signal)
        return sessions

    def generate_clicks(self) -> List[Click]:
        return [c for s in self.generate_sessions() for c in s.clicks]


def synth_generate(spec: SynthSpec) -> bytes:
    """Click CSV in the dataset layout, deterministic per spec.seed."""
    return serialize_clicks(ClickstreamGenerator(spec).generate_clicks())


def bayes_optimal_recall_at_k(spec: SynthSpec, k: int = 20) -> Tuple[float, float]:
    """
    Best achievable Recall@k for one transition, knowing the current item.

    A long dwell means the successor, a short one a uniform draw from the
    item's skip pool; without the dwell class the successor and the pool
    items carry s and (1 - s) / branching.

    Returns:
        (with the dwell class observed, without it)
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    s, b = spec.signal, spec.branching
    with_dwell = s + (1.0 - s) * min(k, b) / b
    ranked = sorted([s] + [(1.0 - s) / b] * b, reverse=True)
    return with_dwell, min(1.0, sum(ranked[:k]))


def bayes_optimal_recall_at_1(spec: SynthSpec) -> Tuple[float, float]:
    """(with dwell, without dwell) Recall@1 bound; see bayes_optimal_recall_at_k."""
    return bayes_optimal_recall_at_k(spec, 1)


def dwell_transition_mutual_information(sessions: Sequence[Session], spec: SynthSpec) -> float:
    """
    Empirical mutual information (bits) between the dwell class (long/short) of
    a click and whether the next click follows the successor ring.
    """
    threshold_ms = (spec.dwell_short[1] + spec.dwell_long[0]) / 2.0 * 1000
    joint: Counter = Counter()
    for s in sessions:
        for a, b in zip(s.clicks, s.clicks[1:]):
            long_dwell = (b.timestamp_ms - a.timestamp_ms) > threshold_ms
            follows = b.item_id == a.item_id % spec.num_items + 1
            joint[(long_dwell, follows)] += 1
    total = sum(joint.values())
    if total == 0:
        return 0.0
    dwell_marginal: Counter = Counter()
    move_marginal: Counter = Counter()
    for (dw, mv), count in joint.items():
        dwell_marginal[dw] += count
        move_marginal[mv] += count
    info = 0.0
    for (dw, mv), count in joint.items():
        p = count / total
        info += p * math.log2(p * total * total / (dwell_marginal[dw] * move_marginal[mv]))
    return info
