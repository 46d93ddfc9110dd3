"""
Click Loader
Loads click logs in the RecSys Challenge 2015 layout and assembles sessions and
the item vocabulary.
"""
import csv
import hashlib
import io
import logging
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from typing import Dict, Iterable, List, Optional, Union

logger = logging.getLogger(__name__)

EPOCH = datetime(1970, 1, 1, tzinfo=timezone.utc)
ONE_MS = timedelta(milliseconds=1)
TIMESTAMP_FORMATS = ('%Y-%m-%dT%H:%M:%S.%fZ', '%Y-%m-%dT%H:%M:%SZ')
VOCAB_HEADER = 'dwell_buckets='


class ClickParseError(ValueError):
    """Raised for a malformed click line."""

    def __init__(self, line_number: int, reason: str):
        super().__init__(f"line {line_number}: {reason}")
        self.line_number = line_number
        self.reason = reason


class EmptyVocabError(ValueError):
    """Raised when a vocabulary would contain no items."""


class VocabError(KeyError):
    """Raised when an item id is missing from the vocabulary."""


@dataclass(frozen=True)
class Click:
    """One click event: c = (item, time) within a session."""
    session_id: int
    timestamp_ms: int
    item_id: int
    category: str = '0'

    def __post_init__(self):
        if self.timestamp_ms < 0:
            raise ValueError(f"timestamp_ms must be >= 0, got {self.timestamp_ms}")


@dataclass
class Session:
    """An ordered series of clicks sharing one session id."""
    session_id: int
    clicks: List[Click] = field(default_factory=list)

    def __len__(self):
        return len(self.clicks)

    @property
    def items(self) -> List[int]:
        return [c.item_id for c in self.clicks]

    @property
    def timestamps(self) -> List[int]:
        return [c.timestamp_ms for c in self.clicks]

    @property
    def first_timestamp_ms(self) -> int:
        return self.clicks[0].timestamp_ms

    @property
    def last_timestamp_ms(self) -> int:
        return self.clicks[-1].timestamp_ms

    def with_clicks(self, clicks: List[Click]) -> 'Session':
        return Session(self.session_id, list(clicks))


def parse_timestamp(text: str) -> int:
    """Convert an ISO-8601 UTC timestamp ('...T10:51:09.277Z') to epoch milliseconds."""
    for fmt in TIMESTAMP_FORMATS:
        try:
            parsed = datetime.strptime(text, fmt).replace(tzinfo=timezone.utc)
        except ValueError:
            continue
        return (parsed - EPOCH) // ONE_MS
    raise ValueError(f"unrecognised timestamp {text!r}")


def format_timestamp(timestamp_ms: int) -> str:
    """Inverse of parse_timestamp, always with milliseconds."""
    moment = EPOCH + timestamp_ms * ONE_MS
    return moment.strftime('%Y-%m-%dT%H:%M:%S.') + f"{moment.microsecond // 1000:03d}Z"


class ClickLoader:
    """Parses click CSV streams; strict mode aborts on bad lines, lenient mode skips them."""

    def __init__(self, strict: bool = True):
        self.strict = strict
        self.skipped_lines = 0
        self.errors: List[ClickParseError] = []

    def _parse_row(self, row: List[str], line_number: int) -> Click:
        if len(row) != 4:
            raise ClickParseError(line_number, f"expected 4 fields, got {len(row)}")
        session_text, time_text, item_text, category = row
        try:
            session_id = int(session_text)
            item_id = int(item_text)
        except ValueError:
            raise ClickParseError(line_number, f"non-integer id in {row!r}") from None
        try:
            timestamp_ms = parse_timestamp(time_text.strip())
        except ValueError as e:
            raise ClickParseError(line_number, str(e)) from None
        if timestamp_ms < 0:
            raise ClickParseError(line_number, "timestamp before 1970")
        return Click(session_id, timestamp_ms, item_id, category)

    @staticmethod
    def _decode(raw: Union[bytes, str], line_number: int) -> str:
        if isinstance(raw, str):
            return raw
        try:
            return raw.decode('utf-8')
        except UnicodeDecodeError as e:
            raise ClickParseError(line_number, f"invalid UTF-8 at byte {e.start}") from None

    @staticmethod
    def _split(line: str, line_number: int) -> List[str]:
        try:
            return next(csv.reader([line]), [])
        except csv.Error as e:
            raise ClickParseError(line_number, str(e)) from None

    def parse(self, stream: Union[bytes, str, Iterable]) -> List[Click]:
        """
        Parse a headerless `session_id,timestamp,item_id,category` stream.

        Accepts bytes, text, or any iterable of lines (binary or text file
        objects included). Lines are decoded one at a time, so undecodable
        bytes only cost their own line.
        """
        lines = stream.splitlines() if isinstance(stream, (bytes, str)) else stream

        clicks: List[Click] = []
        for line_number, raw in enumerate(lines, start=1):
            try:
                row = self._split(self._decode(raw, line_number), line_number)
                if not row or (len(row) == 1 and not row[0].strip()):
                    continue
                clicks.append(self._parse_row(row, line_number))
            except ClickParseError as e:
                if self.strict:
                    raise
                self.skipped_lines += 1
                self.errors.append(e)
                logger.debug("skipping %s", e)
        if self.skipped_lines:
            logger.warning("skipped %d malformed lines", self.skipped_lines)
        return clicks

    def load(self, csv_path: str) -> List[Click]:
        """Load clicks from a file on disk."""
        with open(csv_path, 'rb') as f:
            return self.parse(f)


def parse_clicks(stream, strict: bool = True) -> List[Click]:
    """One-shot parse; see ClickLoader for lenient-mode bookkeeping."""
    return ClickLoader(strict=strict).parse(stream)


def serialize_clicks(clicks: Iterable[Click]) -> bytes:
    """Write clicks back to the headerless CSV layout."""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator='\n')
    for c in clicks:
        writer.writerow([c.session_id, format_timestamp(c.timestamp_ms), c.item_id, c.category])
    return buffer.getvalue().encode('utf-8')


def build_sessions(clicks: Iterable[Click]) -> List[Session]:
    """
    Group clicks by session id.

    Each session is sorted by timestamp (stable, so ties keep file order) and
    sessions are emitted by first timestamp, then session id.
    """
    groups: Dict[int, List[Click]] = {}
    for click in clicks:
        groups.setdefault(click.session_id, []).append(click)
    sessions = [Session(sid, sorted(group, key=lambda c: c.timestamp_ms))
                for sid, group in groups.items()]
    sessions.sort(key=lambda s: (s.first_timestamp_ms, s.session_id))
    return sessions


class Vocab:
    """Bidirectional item id <-> dense index map plus the dwell bucket count."""

    def __init__(self, index_to_item: List[int], dwell_bucket_count: int):
        self.index_to_item: List[int] = list(index_to_item)
        self.item_to_index: Dict[int, int] = {item: i for i, item in enumerate(self.index_to_item)}
        if len(self.item_to_index) != len(self.index_to_item):
            raise ValueError("vocabulary contains duplicate item ids")
        self.dwell_bucket_count = dwell_bucket_count

    def __len__(self):
        return len(self.index_to_item)

    def __contains__(self, item_id: int) -> bool:
        return item_id in self.item_to_index

    def __eq__(self, other):
        return (isinstance(other, Vocab) and self.index_to_item == other.index_to_item
                and self.dwell_bucket_count == other.dwell_bucket_count)

    @property
    def dwell_cap_seconds(self) -> int:
        return self.dwell_bucket_count - 1

    def index_of(self, item_id: int) -> int:
        try:
            return self.item_to_index[item_id]
        except KeyError:
            raise VocabError(f"item {item_id} is not in the vocabulary") from None

    def item_of(self, index: int) -> int:
        return self.index_to_item[index]

    def to_text(self) -> str:
        lines = [f"{VOCAB_HEADER}{self.dwell_bucket_count}"]
        lines.extend(f"{item}\t{i}" for i, item in enumerate(self.index_to_item))
        return '\n'.join(lines) + '\n'

    @classmethod
    def from_text(cls, text: str) -> 'Vocab':
        lines = text.splitlines()
        if not lines or not lines[0].startswith(VOCAB_HEADER):
            raise ValueError(f"vocabulary must start with '{VOCAB_HEADER}<n>'")
        buckets = int(lines[0][len(VOCAB_HEADER):])
        pairs = []
        for number, line in enumerate(lines[1:], start=2):
            if not line.strip():
                continue
            try:
                item_text, index_text = line.split('\t')
                pairs.append((int(index_text), int(item_text)))
            except ValueError:
                raise ValueError(f"vocabulary line {number} is malformed: {line!r}") from None
        pairs.sort()
        if [i for i, _ in pairs] != list(range(len(pairs))):
            raise ValueError("vocabulary indices are not dense")
        return cls([item for _, item in pairs], buckets)

    def save(self, path: str):
        with open(path, 'w', encoding='utf-8', newline='\n') as f:
            f.write(self.to_text())

    @classmethod
    def load(cls, path: str) -> 'Vocab':
        with open(path, 'r', encoding='utf-8') as f:
            return cls.from_text(f.read())

    def digest(self) -> str:
        """SHA-256 of the on-disk form; stored in checkpoints."""
        return hashlib.sha256(self.to_text().encode('utf-8')).hexdigest()


def build_vocab(train_sessions: Iterable[Session], dwell_cap_seconds: int = 3600) -> Vocab:
    """Assign dense indices by first appearance in the training sessions."""
    order: List[int] = []
    seen = set()
    for session in train_sessions:
        for item in session.items:
            if item not in seen:
                seen.add(item)
                order.append(item)
    if not order:
        raise EmptyVocabError("cannot build a vocabulary from no clicks")
    return Vocab(order, dwell_cap_seconds + 1)


def digest_file(path: str, chunk_size: int = 1 << 20) -> Optional[str]:
    """SHA-256 of a file, or None if it does not exist."""
    h = hashlib.sha256()
    try:
        with open(path, 'rb') as f:
            for chunk in iter(lambda: f.read(chunk_size), b''):
                h.update(chunk)
    except FileNotFoundError:
        return None
    return h.hexdigest()
