"""
Preprocess
Session filtering, temporal train/test and fold splits, dwell-time bucketing
and prefix augmentation into fixed-length training examples.
"""
import csv
import logging
from collections import Counter
from dataclasses import dataclass
from datetime import date, datetime, timezone
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple

from click_loader import Session, Vocab, build_vocab

logger = logging.getLogger(__name__)

DEFAULT_DWELL_CAP = 3600
MAX_SESSION_LENGTH = 16
MAX_INPUT_LENGTH = MAX_SESSION_LENGTH - 1


class DegenerateSplitError(ValueError):
    """Raised when all sessions fall on a single day."""


class InsufficientDaysError(ValueError):
    """Raised when there are not enough distinct days for the requested folds."""


class OrderingError(ValueError):
    """Raised when a session's clicks are not in time order."""


@dataclass(frozen=True)
class Example:
    """A prefix of a session, its aligned dwell buckets and the next item (dense indices)."""
    session_id: int
    input_items: Tuple[int, ...]
    input_dwell: Tuple[int, ...]
    target_item: int

    def __post_init__(self):
        if len(self.input_items) != len(self.input_dwell):
            raise ValueError(f"session {self.session_id}: {len(self.input_items)} items "
                             f"but {len(self.input_dwell)} dwell buckets")
        if not 1 <= len(self.input_items) <= MAX_INPUT_LENGTH:
            raise ValueError(f"session {self.session_id}: input length {len(self.input_items)} "
                             f"outside 1..{MAX_INPUT_LENGTH}")

    @property
    def length(self) -> int:
        return len(self.input_items)


@dataclass
class SplitSpec:
    """Train sessions and the held-out sessions of the last day."""
    train: List[Session]
    heldout: List[Session]
    boundary_day: date


@dataclass
class PreparedSplit:
    """Vocabulary and examples ready for training and evaluation."""
    vocab: Vocab
    train_examples: List[Example]
    eval_examples: List[Example]
    train_sessions: List[Session]
    eval_sessions: List[Session]


def session_day(session: Session) -> date:
    """UTC calendar date of the session's last click."""
    return datetime.fromtimestamp(session.last_timestamp_ms // 1000, tz=timezone.utc).date()


def filter_dataset(sessions: Iterable[Session], min_len: int = 2, min_support: int = 5,
                   max_len: int = MAX_SESSION_LENGTH) -> List[Session]:
    """
    Single-pass filter, in order: drop short sessions, drop clicks on items with
    support below min_support, drop sessions that became short, drop long sessions.
    """
    kept = [s for s in sessions if len(s) >= min_len]
    support = Counter(item for s in kept for item in s.items)
    result = []
    for s in kept:
        clicks = [c for c in s.clicks if support[c.item_id] >= min_support]
        if min_len <= len(clicks) <= max_len:
            result.append(s.with_clicks(clicks))
    logger.debug("filter kept %d of %d sessions", len(result), len(kept))
    return result


def _distinct_days(sessions: Sequence[Session]) -> List[date]:
    return sorted({session_day(s) for s in sessions})


def temporal_split(sessions: Sequence[Session]) -> SplitSpec:
    """Hold out the sessions whose last click falls on the latest day."""
    if not sessions:
        raise DegenerateSplitError("cannot split an empty session set")
    days = _distinct_days(sessions)
    if len(days) < 2:
        raise DegenerateSplitError(f"all sessions end on {days[0]}; nothing left to train on")
    boundary = days[-1]
    train = [s for s in sessions if session_day(s) < boundary]
    heldout = [s for s in sessions if session_day(s) == boundary]
    logger.info("split at %s: %d train / %d held-out sessions", boundary, len(train), len(heldout))
    return SplitSpec(train, heldout, boundary)


def fold_days(train_sessions: Sequence[Session], n: int = 6) -> List[date]:
    """The last n distinct days of the training range, oldest first."""
    days = _distinct_days(train_sessions)
    if len(days) < n + 1:
        raise InsufficientDaysError(f"{n} folds need at least {n + 1} distinct days, got {len(days)}")
    return days[-n:]


def make_folds(train_sessions: Sequence[Session], n: int = 6) -> List[Tuple[List[Session], List[Session]]]:
    """
    Fold i validates on the i-th of the last n days and trains only on days
    strictly before it.
    """
    folds = []
    for day in fold_days(train_sessions, n):
        val = [s for s in train_sessions if session_day(s) == day]
        train = [s for s in train_sessions if session_day(s) < day]
        folds.append((train, val))
    return folds


def filter_unseen(eval_sessions: Iterable[Session], train_items: Set[int],
                  min_len: int = 2) -> List[Session]:
    """Drop clicks on items never seen in training, then sessions that became too short."""
    result = []
    for s in eval_sessions:
        clicks = [c for c in s.clicks if c.item_id in train_items]
        if len(clicks) >= min_len:
            result.append(s.with_clicks(clicks))
    return result


def compute_dwell(session: Session, cap_seconds: int = DEFAULT_DWELL_CAP) -> List[int]:
    """
    Dwell bucket of every click but the last: the gap to the next click rounded
    half away from zero to whole seconds and clamped to [0, cap_seconds].
    """
    stamps = session.timestamps
    buckets = []
    for j in range(len(stamps) - 1):
        gap_ms = stamps[j + 1] - stamps[j]
        if gap_ms < 0:
            raise OrderingError(f"session {session.session_id}: click {j + 1} precedes click {j}")
        buckets.append(min((gap_ms + 500) // 1000, cap_seconds))
    return buckets


def augment(session: Session, vocab: Vocab, augmented: bool = True) -> List[Example]:
    """
    Every prefix of the session becomes one example predicting the next item.

    With augmented=False only the longest prefix is emitted.
    """
    k = len(session)
    if not 2 <= k <= MAX_SESSION_LENGTH:
        raise ValueError(f"session {session.session_id} has length {k}, expected 2..{MAX_SESSION_LENGTH}")
    items = [vocab.index_of(item) for item in session.items]
    dwell = compute_dwell(session, vocab.dwell_cap_seconds)
    prefixes = range(1, k) if augmented else [k - 1]
    return [Example(session.session_id, tuple(items[:p]), tuple(dwell[:p]), items[p])
            for p in prefixes]


def build_examples(sessions: Iterable[Session], vocab: Vocab, augmented: bool = True) -> List[Example]:
    examples: List[Example] = []
    for s in sessions:
        examples.extend(augment(s, vocab, augmented))
    return examples


def prepare_split(train_sessions: Sequence[Session], eval_sessions: Sequence[Session],
                  dwell_cap_seconds: int = DEFAULT_DWELL_CAP, augment_train: bool = True,
                  augment_eval: bool = True) -> PreparedSplit:
    """Build the vocabulary from training sessions, clean the evaluation side and emit examples."""
    vocab = build_vocab(train_sessions, dwell_cap_seconds)
    eval_clean = filter_unseen(eval_sessions, set(vocab.item_to_index))
    return PreparedSplit(
        vocab=vocab,
        train_examples=build_examples(train_sessions, vocab, augment_train),
        eval_examples=build_examples(eval_clean, vocab, augment_eval),
        train_sessions=list(train_sessions),
        eval_sessions=eval_clean,
    )


def dwell_histogram(sessions: Iterable[Session], cap: int = DEFAULT_DWELL_CAP) -> List[Tuple[int, int]]:
    """(bucket, count) over every computed dwell bucket, ascending by bucket."""
    counts: Counter = Counter()
    for s in sessions:
        counts.update(compute_dwell(s, cap))
    return sorted(counts.items())


def write_histogram_csv(table: Sequence[Tuple[int, int]], path: str):
    with open(path, 'w', encoding='utf-8', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(['bucket', 'count'])
        writer.writerows(table)


def corpus_stats(sessions: Sequence[Session]) -> Dict[str, float]:
    """Session count, click count, distinct items and mean session length."""
    clicks = sum(len(s) for s in sessions)
    return {
        'sessions': len(sessions),
        'clicks': clicks,
        'items': len({item for s in sessions for item in s.items}),
        'avg_session_length': clicks / len(sessions) if sessions else 0.0,
    }


def write_examples(examples: Iterable[Example], path: str):
    """One example per line: session_id, items, dwell buckets, target (tab separated)."""
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        for ex in examples:
            f.write(f"{ex.session_id}\t{','.join(map(str, ex.input_items))}\t"
                    f"{','.join(map(str, ex.input_dwell))}\t{ex.target_item}\n")


def read_examples(path: str, vocab: Optional[Vocab] = None) -> List[Example]:
    examples = []
    with open(path, 'r', encoding='utf-8') as f:
        for number, line in enumerate(f, start=1):
            line = line.rstrip('\n')
            if not line:
                continue
            try:
                sid, items, dwell, target = line.split('\t')
                ex = Example(int(sid), tuple(int(i) for i in items.split(',')),
                             tuple(int(d) for d in dwell.split(',')), int(target))
            except ValueError as e:
                raise ValueError(f"{path}:{number}: {e}") from None
            if vocab is not None:
                bad = [i for i in ex.input_items + (ex.target_item,) if not 0 <= i < len(vocab)]
                if bad or any(d >= vocab.dwell_bucket_count for d in ex.input_dwell):
                    raise ValueError(f"{path}:{number}: index outside the vocabulary")
            examples.append(ex)
    return examples


@dataclass
class PreprocessConfig:
    """Filtering thresholds, dwell cap and augmentation switches."""
    strict: bool = True
    min_len: int = 2
    min_support: int = 5
    max_len: int = MAX_SESSION_LENGTH
    dwell_cap: int = DEFAULT_DWELL_CAP
    augment_train: bool = True
    augment_eval: bool = True

    def __post_init__(self):
        if not 2 <= self.min_len <= self.max_len <= MAX_SESSION_LENGTH:
            raise ValueError(f"need 2 <= min_len <= max_len <= {MAX_SESSION_LENGTH}, "
                             f"got {self.min_len} and {self.max_len}")
        if self.dwell_cap < 0:
            raise ValueError(f"dwell_cap must be >= 0, got {self.dwell_cap}")


def prepare_corpus(sessions: Sequence[Session], config: PreprocessConfig) -> Tuple[SplitSpec, PreparedSplit]:
    """Filter, split on the last day and build train/test examples."""
    filtered = filter_dataset(sessions, config.min_len, config.min_support, config.max_len)
    split = temporal_split(filtered)
    prepared = prepare_split(split.train, split.heldout, config.dwell_cap,
                             config.augment_train, config.augment_eval)
    logger.info("prepared %d train / %d test examples over %d items",
                len(prepared.train_examples), len(prepared.eval_examples), len(prepared.vocab))
    return split, prepared
