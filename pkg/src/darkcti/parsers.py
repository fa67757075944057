"""Schema-driven extraction of products and forum topics from HTML pages.

A schema maps record fields to CSS selectors. ``"css@attr"`` reads an
attribute, ``"@attr"`` reads it from the enclosing node, and a bare selector
reads whitespace-normalized text. The ``record`` selector picks one node per
product or topic and the forum-only ``post`` selector picks post nodes inside
a topic. Post fields are looked up inside each post node, everything else
inside the record node.
"""

from __future__ import annotations

import json
import logging
import re
import warnings as _warnings
from dataclasses import dataclass, field, replace
from datetime import datetime
from importlib import resources
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence
from urllib.parse import urljoin

import yaml
from bs4 import BeautifulSoup, MarkupResemblesLocatorWarning

from darkcti.analytics import extract_cves
from darkcti.crawler import UrlError, canonicalize
from darkcti.datamodel import (
    ForumPost,
    ForumTopic,
    Label,
    MarketProduct,
    RecordKind,
    ValidationError,
    to_utc,
)

log = logging.getLogger(__name__)

MANDATORY = {
    RecordKind.MARKET: ("record", "item_title", "item_description", "vendor_name"),
    RecordKind.FORUM: ("record", "post", "topic_content", "topic_author", "post_content", "post_author"),
}
MARKET_FIELDS = ("url", "item_title", "item_description", "vendor_name", "shipping_details", "item_reviews",
                 "items_sold", "items_left", "transaction_details", "ratings", "price_btc")
TOPIC_FIELDS = ("topic_id", "topic_content", "topic_author", "topic_interest")
POST_FIELDS = ("post_id", "post_content", "post_author", "author_status", "reputation", "timestamp")
_CONTAINERS = ("record", "post")
_INT_FIELDS = {"items_sold", "items_left", "topic_interest", "reputation"}
_FLOAT_FIELDS = {"ratings", "price_btc"}
_NUMBER = re.compile(r"-?\d+(?:\.\d+)?(?:[eE][-+]?\d+)?")
_INTEGER = re.compile(r"-?\d+")


class SchemaError(ValueError):
    pass


class ExtractionError(ValueError):
    def __init__(self, url: str, field_name: str, message: str):
        super().__init__(f"{url}: {field_name}: {message}")
        self.url, self.field = url, field_name


@dataclass(frozen=True)
class ExtractionSchema:
    site_id: str
    kind: RecordKind
    selectors: Mapping[str, str]
    link_selectors: tuple[str, ...] = ()
    pagination_selector: str | None = None

    def __post_init__(self):
        try:
            object.__setattr__(self, "kind", self.kind if isinstance(self.kind, RecordKind) else RecordKind(str(self.kind).upper()))
        except ValueError:
            raise SchemaError(f"kind must be MARKET or FORUM, got {self.kind!r}") from None
        object.__setattr__(self, "selectors", dict(self.selectors))
        object.__setattr__(self, "link_selectors", tuple(self.link_selectors))
        missing = [f for f in MANDATORY[self.kind] if not self.selectors.get(f)]
        if missing:
            raise SchemaError(f"schema for {self.site_id} lacks mandatory selectors: {', '.join(missing)}")
        allowed = set(_CONTAINERS) | set(MARKET_FIELDS if self.kind is RecordKind.MARKET else TOPIC_FIELDS + POST_FIELDS)
        unknown = set(self.selectors) - allowed
        if unknown:
            raise SchemaError(f"unknown selector keys for {self.kind.value}: {', '.join(sorted(unknown))}")

    @classmethod
    def from_dict(cls, data: Mapping) -> "ExtractionSchema":
        extra = set(data) - set(cls.__dataclass_fields__)
        if extra:
            raise SchemaError(f"unknown schema keys: {', '.join(sorted(extra))}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise SchemaError(str(exc)) from None


def load_schema(path) -> ExtractionSchema:
    data = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    if not isinstance(data, dict):
        raise SchemaError(f"{path}: expected a mapping")
    return ExtractionSchema.from_dict(data)


def shipped_schema(name: str, site_id: str | None = None) -> ExtractionSchema:
    """One of the schemas bundled in ``darkcti/data/schemas`` (e.g. ``synth_market``)."""
    text = resources.files("darkcti").joinpath(f"data/schemas/{name}.yaml").read_text(encoding="utf-8")
    schema = ExtractionSchema.from_dict(yaml.safe_load(text))
    return replace(schema, site_id=site_id) if site_id else schema


# -- selector evaluation ---------------------------------------------------

Warnings = list  # of {"url", "field", "message"} dicts


def _soup(html) -> BeautifulSoup:
    if isinstance(html, BeautifulSoup):
        return html
    if isinstance(html, bytes):
        html = html.decode("utf-8", errors="replace")
    with _warnings.catch_warnings():
        _warnings.simplefilter("ignore", MarkupResemblesLocatorWarning)
        return BeautifulSoup(html, "html.parser")


def _split(expr: str) -> tuple[str, str | None]:
    css, _, attr = expr.rpartition("@") if "@" in expr else (expr, "", "")
    return css.strip(), (attr.strip() or None)


def _text(node) -> str:
    return " ".join(node.get_text(" ").split())


def _select(node, expr: str) -> list[str]:
    css, attr = _split(expr)
    nodes = node.select(css) if css else [node]
    if attr is None:
        return [_text(n) for n in nodes]
    return [" ".join(str(n.get(attr)).split()) for n in nodes if n.get(attr) is not None]


def _first(node, expr: str | None) -> str | None:
    if not expr:
        return None
    values = _select(node, expr)
    return values[0] if values else None


def _number(raw: str | None, name: str, url: str, sink: Warnings):
    """First number embedded in the text; unparseable text becomes None with a warning."""
    if raw is None:
        return None
    pattern = _INTEGER if name in _INT_FIELDS else _NUMBER
    m = pattern.search(raw.replace(",", ""))
    if not m:
        sink.append({"url": url, "field": name, "message": f"no number in {raw!r}"})
        return None
    value = int(m.group(0)) if name in _INT_FIELDS else float(m.group(0))
    if name in ("items_sold", "items_left", "topic_interest") and value < 0:
        sink.append({"url": url, "field": name, "message": f"negative count {raw!r}"})
        return None
    if name == "ratings" and not 0.0 <= value <= 5.0:
        sink.append({"url": url, "field": name, "message": f"rating {raw!r} outside [0, 5]"})
        return None
    if name == "price_btc" and value < 0:
        sink.append({"url": url, "field": name, "message": f"negative price {raw!r}"})
        return None
    return value


def _mandatory(node, schema: ExtractionSchema, name: str, url: str) -> str:
    value = _first(node, schema.selectors[name])
    if value is None:
        raise ExtractionError(url, name, f"selector {schema.selectors[name]!r} matched nothing")
    return value


# -- pages -----------------------------------------------------------------

def parse_market_page(html, schema: ExtractionSchema, url: str, fetched_at: datetime,
                      sink: Warnings | None = None) -> list[MarketProduct]:
    """One product per ``record`` node. ``fetched_at`` becomes first_seen and last_seen."""
    if schema.kind is not RecordKind.MARKET:
        raise SchemaError(f"schema {schema.site_id} is not a MARKET schema")
    sink = [] if sink is None else sink
    sel = schema.selectors
    seen_at = to_utc(fetched_at)
    out = []
    for node in _soup(html).select(sel["record"]):
        title = _mandatory(node, schema, "item_title", url)
        desc = _mandatory(node, schema, "item_description", url)
        vendor = _mandatory(node, schema, "vendor_name", url)
        href = _first(node, sel.get("url"))
        nums = {k: _number(_first(node, sel.get(k)), k, url, sink) for k in ("items_sold", "items_left", "ratings", "price_btc")}
        try:
            out.append(MarketProduct(
                site_id=schema.site_id, url=urljoin(url, href) if href else url,
                item_title=title, item_description=desc, vendor_name=vendor,
                shipping_details=_first(node, sel.get("shipping_details")) or "",
                item_reviews=tuple(v for v in _select(node, sel["item_reviews"]) if v) if sel.get("item_reviews") else (),
                cve_ids=tuple(extract_cves(f"{title} {desc}")),
                transaction_details=_first(node, sel.get("transaction_details")),
                first_seen=seen_at, last_seen=seen_at, label=Label.UNLABELED, **nums,
            ))
        except ValidationError as exc:
            raise ExtractionError(url, exc.field, str(exc)) from None
    return out


def parse_forum_page(html, schema: ExtractionSchema, url: str, fetched_at: datetime | None = None,
                     sink: Warnings | None = None) -> list[ForumTopic]:
    """Topics with their posts in page order. Post timestamps come from the page;
    a post without one is stamped ``fetched_at`` when given."""
    if schema.kind is not RecordKind.FORUM:
        raise SchemaError(f"schema {schema.site_id} is not a FORUM schema")
    sink = [] if sink is None else sink
    sel = schema.selectors
    out = []
    for i, node in enumerate(_soup(html).select(sel["record"])):
        posts = []
        for j, pnode in enumerate(node.select(sel["post"])):
            stamp = _first(pnode, sel.get("timestamp"))
            when = fetched_at
            if stamp is not None:
                try:
                    when = to_utc(stamp)
                except ValueError:
                    sink.append({"url": url, "field": "timestamp", "message": f"unparseable time {stamp!r}"})
            posts.append(dict(
                post_id=_first(pnode, sel.get("post_id")) or f"{i + 1}-{j + 1}",
                post_content=_mandatory(pnode, schema, "post_content", url),
                post_author=_mandatory(pnode, schema, "post_author", url),
                author_status=_first(pnode, sel.get("author_status")),
                reputation=_number(_first(pnode, sel.get("reputation")), "reputation", url, sink),
                timestamp=to_utc(when) if when is not None else None,
            ))
        try:
            out.append(ForumTopic(
                site_id=schema.site_id,
                topic_id=_first(node, sel.get("topic_id")) or f"{canonicalize(url)}#{i + 1}",
                topic_content=_mandatory(node, schema, "topic_content", url),
                topic_author=_mandatory(node, schema, "topic_author", url),
                topic_interest=_number(_first(node, sel.get("topic_interest")), "topic_interest", url, sink),
                posts=tuple(ForumPost(**p) for p in posts),
                label=Label.UNLABELED,
            ))
        except ValidationError as exc:
            raise ExtractionError(url, exc.field, str(exc)) from None
    return out


def merge_topics(topics: Iterable[ForumTopic]) -> list[ForumTopic]:
    """Join pages of the same topic (same site and topic_id), in the order given.

    Topic-level fields come from the first page; posts already seen are dropped.
    """
    merged: dict[tuple[str, str], ForumTopic] = {}
    for t in topics:
        prev = merged.get(t.key)
        if prev is None:
            merged[t.key] = t
            continue
        have = {p.post_id for p in prev.posts}
        extra = tuple(p for p in t.posts if p.post_id not in have)
        merged[t.key] = replace(prev, posts=prev.posts + extra)
    return list(merged.values())


# -- links -----------------------------------------------------------------

def extract_links(html, schema: ExtractionSchema, base_url: str, sink: Warnings | None = None) -> list[str]:
    """Absolute URLs of every link and pagination match, first occurrence kept."""
    sink = [] if sink is None else sink
    doc = _soup(html)
    exprs = list(schema.link_selectors) + ([schema.pagination_selector] if schema.pagination_selector else [])
    out, seen = [], set()
    for expr in exprs:
        css, attr = _split(expr)
        for href in _select(doc, f"{css}@{attr or 'href'}"):
            try:
                absolute = urljoin(base_url, href)
                key = canonicalize(absolute)
            except (UrlError, ValueError) as exc:
                sink.append({"url": base_url, "field": "link", "message": f"skipping {href!r}: {exc}"})
                continue
            if key not in seen:
                seen.add(key)
                out.append(absolute)
    return out


def link_extractor(schema: ExtractionSchema) -> Callable[[str, bytes], list[str]]:
    """Adapter for ``crawler.crawl_site``."""
    return lambda url, body: extract_links(body, schema, url)


def is_record_page(html, schema: ExtractionSchema) -> bool:
    return bool(_soup(html).select(schema.selectors["record"]))


def relevant_url_list(records: Sequence) -> list[str]:
    """URLs of RELEVANT products, deduplicated in first-seen order.

    Forum topics carry no URL and are skipped.
    """
    out: dict[str, None] = {}
    for r in records:
        if isinstance(r, MarketProduct) and r.label is Label.RELEVANT:
            out.setdefault(r.url, None)
    return list(out)


def write_warnings(sink: Sequence[Mapping], path) -> Path:
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for w in sink:
            fh.write(json.dumps({"url": w["url"], "field": w["field"], "message": w["message"]}, ensure_ascii=False) + "\n")
    return path
