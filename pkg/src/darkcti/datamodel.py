"""Record types for marketplace products and forum topics, plus NDJSON/CSV persistence.

Records are frozen dataclasses validated on construction. Sequences are stored as
tuples so records stay hashable and safe to share between threads.
"""

from __future__ import annotations

import csv
import dataclasses
import enum
import json
import re
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Sequence, Union


class Label(str, enum.Enum):
    RELEVANT = "RELEVANT"
    NOT_RELEVANT = "NOT_RELEVANT"
    UNLABELED = "UNLABELED"


class RecordKind(str, enum.Enum):
    MARKET = "MARKET"
    FORUM = "FORUM"


class ValidationError(ValueError):
    """A record field breaks its type invariant."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


class RecordFileError(ValueError):
    """A record file line could not be parsed."""

    def __init__(self, path, lineno: int, message: str):
        super().__init__(f"{path}:{lineno}: {message}")
        self.path = str(path)
        self.lineno = lineno


class LabelError(KeyError):
    """Label keys that are missing, duplicated or ambiguous."""

    def __init__(self, message: str, keys):
        super().__init__(message)
        self.keys = list(keys)

    def __str__(self):
        return f"{self.args[0]}: {', '.join(map(str, self.keys))}"


NORMALIZED_CVE = re.compile(r"^CVE-\d{4}-\d{4,}$")
_LOOSE_CVE = re.compile(r"CVE[-\s](\d{4})[-\s](\d{4,})", re.IGNORECASE)


def normalize_cve(raw: str) -> str:
    """'CVE 2015-0057' / 'cve-2015-0057' -> 'CVE-2015-0057'."""
    m = _LOOSE_CVE.fullmatch(raw.strip())
    if m is None:
        raise ValueError(f"not a CVE identifier: {raw!r}")
    return f"CVE-{m.group(1)}-{m.group(2)}"


def parse_label(value) -> Label:
    if isinstance(value, Label):
        return value
    try:
        return Label(str(value).strip().upper())
    except ValueError:
        raise ValidationError("label", f"unknown label {value!r}") from None


def to_utc(value) -> datetime:
    """Accept a datetime or ISO-8601 string; naive values are taken as UTC."""
    if isinstance(value, str):
        text = value.strip()
        if text.endswith("Z"):
            text = text[:-1] + "+00:00"
        value = datetime.fromisoformat(text)
    if not isinstance(value, datetime):
        raise TypeError(f"expected datetime or ISO string, got {type(value).__name__}")
    if value.tzinfo is None:
        return value.replace(tzinfo=timezone.utc)
    return value.astimezone(timezone.utc)


def format_utc(value: datetime) -> str:
    return value.astimezone(timezone.utc).isoformat().replace("+00:00", "Z")


def _check_count(name, value):
    if value is None:
        return None
    if isinstance(value, bool) or not isinstance(value, int):
        raise ValidationError(name, f"expected integer, got {value!r}")
    if value < 0:
        raise ValidationError(name, f"must be nonnegative, got {value}")
    return value


def _check_rational(name, value, lo=0.0, hi=None):
    if value is None:
        return None
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ValidationError(name, f"expected number, got {value!r}")
    value = float(value)
    if value != value or value < lo or (hi is not None and value > hi):
        bound = f"[{lo}, {hi}]" if hi is not None else f">= {lo}"
        raise ValidationError(name, f"must lie in {bound}, got {value}")
    return value


def _check_str(name, value, optional=False):
    if value is None and optional:
        return None
    if not isinstance(value, str):
        raise ValidationError(name, f"expected string, got {value!r}")
    return value


def _timestamp(name, value, optional=False):
    if value is None and optional:
        return None
    try:
        return to_utc(value)
    except (TypeError, ValueError) as exc:
        raise ValidationError(name, str(exc)) from None


@dataclass(frozen=True, kw_only=True)
class MarketProduct:
    site_id: str
    url: str
    item_title: str
    item_description: str
    vendor_name: str
    shipping_details: str = ""
    item_reviews: tuple[str, ...] = ()
    items_sold: int | None = None
    items_left: int | None = None
    cve_ids: tuple[str, ...] = ()
    transaction_details: str | None = None
    ratings: float | None = None
    price_btc: float | None = None
    first_seen: datetime
    last_seen: datetime
    label: Label = Label.UNLABELED

    def __post_init__(self):
        put = lambda k, v: object.__setattr__(self, k, v)  # noqa: E731
        for name in ("site_id", "url", "item_title", "item_description", "vendor_name", "shipping_details"):
            _check_str(name, getattr(self, name))
        _check_str("transaction_details", self.transaction_details, optional=True)
        if isinstance(self.item_reviews, str):
            raise ValidationError("item_reviews", "expected a sequence of strings")
        reviews = tuple(self.item_reviews)
        for r in reviews:
            _check_str("item_reviews", r)
        put("item_reviews", reviews)
        put("items_sold", _check_count("items_sold", self.items_sold))
        put("items_left", _check_count("items_left", self.items_left))
        put("ratings", _check_rational("ratings", self.ratings, 0.0, 5.0))
        put("price_btc", _check_rational("price_btc", self.price_btc))
        cves = []
        for c in self.cve_ids:
            try:
                cves.append(normalize_cve(c))
            except (ValueError, AttributeError):
                raise ValidationError("cve_ids", f"not a CVE identifier: {c!r}") from None
        put("cve_ids", tuple(cves))
        first = _timestamp("first_seen", self.first_seen)
        last = _timestamp("last_seen", self.last_seen)
        if first > last:
            raise ValidationError("first_seen", "first_seen is later than last_seen")
        put("first_seen", first)
        put("last_seen", last)
        put("label", parse_label(self.label))

    @property
    def key(self) -> tuple[str, str]:
        return (self.site_id, self.url)

    @property
    def kind(self) -> RecordKind:
        return RecordKind.MARKET


@dataclass(frozen=True)
class ForumPost:
    post_id: str
    post_content: str
    post_author: str
    author_status: str | None = None
    reputation: int | None = None
    timestamp: datetime | None = None

    def __post_init__(self):
        for name in ("post_id", "post_content", "post_author"):
            _check_str(name, getattr(self, name))
        _check_str("author_status", self.author_status, optional=True)
        if self.reputation is not None and (isinstance(self.reputation, bool) or not isinstance(self.reputation, int)):
            raise ValidationError("reputation", f"expected integer, got {self.reputation!r}")
        object.__setattr__(self, "timestamp", _timestamp("timestamp", self.timestamp, optional=True))


@dataclass(frozen=True)
class ForumTopic:
    site_id: str
    topic_id: str
    topic_content: str
    topic_author: str
    topic_interest: int | None = None
    posts: tuple[ForumPost, ...] = ()
    label: Label = Label.UNLABELED

    def __post_init__(self):
        for name in ("site_id", "topic_id", "topic_content", "topic_author"):
            _check_str(name, getattr(self, name))
        object.__setattr__(self, "topic_interest", _check_count("topic_interest", self.topic_interest))
        posts = tuple(p if isinstance(p, ForumPost) else ForumPost(**p) for p in self.posts)
        seen = set()
        for p in posts:
            if p.post_id in seen:
                raise ValidationError("posts", f"duplicate post_id {p.post_id!r} in topic {self.topic_id!r}")
            seen.add(p.post_id)
        stamps = [p.timestamp for p in posts if p.timestamp is not None]
        if any(a > b for a, b in zip(stamps, stamps[1:])):
            raise ValidationError("posts", "posts are not in ascending timestamp order")
        object.__setattr__(self, "posts", posts)
        object.__setattr__(self, "label", parse_label(self.label))

    @property
    def key(self) -> tuple[str, str]:
        return (self.site_id, self.topic_id)

    @property
    def kind(self) -> RecordKind:
        return RecordKind.FORUM


Record = Union[MarketProduct, ForumTopic]


@dataclass(frozen=True)
class LabeledExample:
    source_site: str
    title_text: str
    body_text: str
    label: Label = Label.UNLABELED


def to_example(record: Record) -> LabeledExample:
    if isinstance(record, MarketProduct):
        return LabeledExample(record.site_id, record.item_title, record.item_description, record.label)
    if isinstance(record, ForumTopic):
        body = " ".join(p.post_content for p in record.posts)
        return LabeledExample(record.site_id, record.topic_content, body, record.label)
    raise TypeError(f"not a record: {type(record).__name__}")


# -- persistence -----------------------------------------------------------

def _jsonable(value):
    if isinstance(value, enum.Enum):
        return value.value
    if isinstance(value, datetime):
        return format_utc(value)
    if isinstance(value, tuple):
        return [_jsonable(v) for v in value]
    if dataclasses.is_dataclass(value):
        return record_to_dict(value)
    return value


def record_to_dict(record) -> dict:
    return {f.name: _jsonable(getattr(record, f.name)) for f in dataclasses.fields(record)}


_MARKET_FIELDS = {f.name for f in dataclasses.fields(MarketProduct)}
_FORUM_FIELDS = {f.name for f in dataclasses.fields(ForumTopic)}
_POST_FIELDS = {f.name for f in dataclasses.fields(ForumPost)}


def record_from_dict(data: dict, kind: RecordKind | str | None = None) -> Record:
    """Build a validated record; ``kind=None`` infers it from the keys."""
    if kind is None:
        kind = RecordKind.FORUM if "topic_id" in data else RecordKind.MARKET
    kind = RecordKind(kind)
    allowed = _MARKET_FIELDS if kind is RecordKind.MARKET else _FORUM_FIELDS
    unknown = set(data) - allowed
    if unknown:
        raise ValidationError(sorted(unknown)[0], f"unknown field for {kind.value} record")
    data = dict(data)
    try:
        if kind is RecordKind.FORUM:
            posts = []
            for p in data.get("posts", ()):
                extra = set(p) - _POST_FIELDS
                if extra:
                    raise ValidationError(sorted(extra)[0], "unknown field for forum post")
                posts.append(ForumPost(**p))
            data["posts"] = posts
            return ForumTopic(**data)
        return MarketProduct(**data)
    except TypeError as exc:
        # missing required field
        raise ValidationError("record", str(exc)) from None


def dumps_record(record: Record) -> str:
    return json.dumps(record_to_dict(record), ensure_ascii=False)


def _check_topic_ids(records: Iterable[Record]):
    seen = set()
    for r in records:
        if isinstance(r, ForumTopic):
            if r.key in seen:
                raise ValidationError("topic_id", f"duplicate topic_id {r.topic_id!r} on site {r.site_id!r}")
            seen.add(r.key)


def save_records(records: Sequence[Record], path) -> int:
    """Write records as NDJSON, one per line. Returns the number written."""
    records = list(records)
    for r in records:
        if not isinstance(r, (MarketProduct, ForumTopic)):
            raise TypeError(f"not a record: {type(r).__name__}")
    _check_topic_ids(records)
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(dumps_record(r))
            fh.write("\n")
    return len(records)


def load_records(path, kind: RecordKind | str | None = None) -> list[Record]:
    """Read NDJSON records in file order. Blank lines are skipped."""
    out = []
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                data = json.loads(line)
            except json.JSONDecodeError as exc:
                raise RecordFileError(path, lineno, f"malformed JSON ({exc.msg})") from None
            if not isinstance(data, dict):
                raise RecordFileError(path, lineno, "expected a JSON object")
            try:
                out.append(record_from_dict(data, kind))
            except ValidationError as exc:
                raise ValidationError(exc.field, f"line {lineno}: {exc}") from None
    _check_topic_ids(out)
    return out


MARKET_CSV_COLUMNS = (
    "site_id", "url", "item_title", "item_description", "vendor_name", "shipping_details",
    "item_reviews", "items_sold", "items_left", "cve_ids", "transaction_details", "ratings",
    "price_btc", "first_seen", "last_seen", "label",
)
# one row per post; topic columns repeat, topics without posts get one row with empty post columns
FORUM_CSV_COLUMNS = (
    "site_id", "topic_id", "topic_content", "topic_author", "topic_interest", "label",
    "post_id", "post_content", "post_author", "author_status", "reputation", "timestamp",
)


def _csv_cell(value) -> str:
    value = _jsonable(value)
    if value is None:
        return ""
    if isinstance(value, list):
        return "|".join(str(v) for v in value)
    return str(value)


def export_csv(records: Sequence[Record], path, kind: RecordKind | str) -> int:
    """Flat CSV export for spreadsheets. Returns rows written."""
    kind = RecordKind(kind)
    rows = 0
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if kind is RecordKind.MARKET:
            writer.writerow(MARKET_CSV_COLUMNS)
            for r in records:
                writer.writerow([_csv_cell(getattr(r, c)) for c in MARKET_CSV_COLUMNS])
                rows += 1
        else:
            writer.writerow(FORUM_CSV_COLUMNS)
            for t in records:
                head = [_csv_cell(getattr(t, c)) for c in FORUM_CSV_COLUMNS[:6]]
                for p in t.posts or (None,):
                    tail = [_csv_cell(getattr(p, c)) if p else "" for c in FORUM_CSV_COLUMNS[6:]]
                    writer.writerow(head + tail)
                    rows += 1
    return rows


# -- labels ----------------------------------------------------------------

@dataclass(frozen=True)
class LabelEntry:
    site_id: str
    record_key: str
    label: Label = field(default=Label.UNLABELED)


def load_label_file(path) -> list[LabelEntry]:
    """CSV with header ``site_id,record_key,label``; record_key is a url or topic_id."""
    with Path(path).open(encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"site_id", "record_key", "label"} - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: label file lacks columns {sorted(missing)}")
        return [LabelEntry(row["site_id"], row["record_key"], parse_label(row["label"])) for row in reader]


def save_label_file(entries: Iterable[LabelEntry], path) -> int:
    n = 0
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["site_id", "record_key", "label"])
        for e in entries:
            writer.writerow([e.site_id, e.record_key, Label(e.label).value])
            n += 1
    return n


def apply_labels(records: Sequence[Record], labels: Sequence) -> tuple[list[Record], int]:
    """Stamp labels onto records keyed by (site_id, url) or (site_id, topic_id).

    ``labels`` holds LabelEntry values or (site_id, record_key, label) triples.
    Returns the updated records (input order) and the number of labels applied.
    """
    entries = [e if isinstance(e, LabelEntry) else LabelEntry(e[0], e[1], parse_label(e[2])) for e in labels]
    seen, dupes = set(), []
    for e in entries:
        k = (e.site_id, e.record_key)
        if k in seen and k not in dupes:
            dupes.append(k)
        seen.add(k)
    if dupes:
        raise LabelError("duplicate keys in label file", dupes)

    index: dict[tuple[str, str], list[int]] = {}
    for i, r in enumerate(records):
        index.setdefault(r.key, []).append(i)
    wanted = [(e.site_id, e.record_key) for e in entries]
    missing = [k for k in wanted if k not in index]
    if missing:
        raise LabelError("label keys match no record", missing)
    ambiguous = [k for k in wanted if len(index[k]) > 1]
    if ambiguous:
        raise LabelError("label keys match several records", ambiguous)

    out = list(records)
    for e in entries:
        i = index[(e.site_id, e.record_key)][0]
        out[i] = dataclasses.replace(out[i], label=e.label)
    return out, len(entries)
