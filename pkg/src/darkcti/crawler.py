"""Breadth-first site crawler with politeness, loop detection and retry.

Fetchers and clocks are injected. Two fetchers ship: one that serves a fixture
directory (a ``manifest.json`` mapping URL to file) and a plain HTTP one.
Failures are returned as data, never raised out of the crawl.
"""

from __future__ import annotations

import json
import logging
import re
import threading
import time
from collections import deque
from concurrent.futures import FIRST_COMPLETED, ThreadPoolExecutor, wait
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, Mapping, Protocol, Sequence
from urllib.parse import parse_qsl, urlencode, urljoin, urlsplit, urlunsplit

import yaml

from darkcti.datamodel import RecordKind, format_utc

log = logging.getLogger(__name__)

DEFAULT_PORTS = {"http": 80, "https": 443}


class ConfigError(ValueError):
    pass


class UrlError(ValueError):
    pass


class TransientFetchError(Exception):
    """Worth retrying: timeouts, connection resets, 5xx."""


class PermanentFetchError(Exception):
    """Not worth retrying: missing page, 4xx."""


class FetchStatus(str, Enum):
    OK = "OK"
    # status of a single failed attempt; fetch_with_retry resolves it before returning
    RETRYABLE_FAILURE = "RETRYABLE_FAILURE"
    PERMANENT_FAILURE = "PERMANENT_FAILURE"


# -- urls ------------------------------------------------------------------

def canonicalize(url: str) -> str:
    """Fingerprint used for loop detection. Idempotent."""
    if not isinstance(url, str) or not url.strip():
        raise UrlError(f"malformed URL: {url!r}")
    try:
        parts = urlsplit(url.strip())
        port = parts.port
    except ValueError as exc:
        raise UrlError(f"malformed URL {url!r}: {exc}") from None
    scheme = parts.scheme.lower()
    if not scheme or not parts.netloc or not parts.hostname or " " in url.strip():
        raise UrlError(f"not an absolute URL: {url!r}")
    host = parts.hostname.lower()
    if port is not None and port != DEFAULT_PORTS.get(scheme):
        host = f"{host}:{port}"
    if parts.username is not None:
        cred = parts.username + (f":{parts.password}" if parts.password is not None else "")
        host = f"{cred}@{host}"
    path = parts.path or "/"
    if len(path) > 1 and path.endswith("/"):
        path = path.rstrip("/") or "/"
    query = parse_qsl(parts.query, keep_blank_values=True)
    query.sort(key=lambda kv: kv[0])
    return urlunsplit((scheme, host, path, urlencode(query), ""))


def host_of(url: str) -> str:
    return urlsplit(canonicalize(url)).netloc


# -- configuration ---------------------------------------------------------

@dataclass(frozen=True)
class SiteConfig:
    site_id: str
    kind: RecordKind
    seed_urls: tuple[str, ...]
    allow_patterns: tuple[str, ...] = (".*",)
    deny_patterns: tuple[str, ...] = ()
    max_depth: int = 3
    politeness_delay_ms: int = 1000
    max_retries: int = 3
    retry_backoff_ms: int = 500
    headers: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        set_ = lambda name, value: object.__setattr__(self, name, value)  # noqa: E731
        if not self.site_id:
            raise ConfigError("site_id must be nonempty")
        try:
            set_("kind", self.kind if isinstance(self.kind, RecordKind) else RecordKind(str(self.kind).upper()))
        except ValueError:
            raise ConfigError(f"kind must be MARKET or FORUM, got {self.kind!r}") from None
        for name in ("seed_urls", "allow_patterns", "deny_patterns"):
            value = getattr(self, name)
            if isinstance(value, str):
                value = (value,)
            set_(name, tuple(value))
        if not self.seed_urls:
            raise ConfigError("seed_urls must be nonempty")
        if self.max_depth < 1:
            raise ConfigError("max_depth must be at least 1")
        if self.politeness_delay_ms < 0 or self.max_retries < 0:
            raise ConfigError("politeness_delay_ms and max_retries must be nonnegative")
        if self.retry_backoff_ms < 1:
            raise ConfigError("retry_backoff_ms must be positive")
        try:
            set_("_allow", tuple(re.compile(p) for p in self.allow_patterns))
            set_("_deny", tuple(re.compile(p) for p in self.deny_patterns))
        except re.error as exc:
            raise ConfigError(f"bad URL pattern: {exc}") from None
        set_("headers", dict(self.headers or {}))
        for url in self.seed_urls:
            if not self.allowed(url):
                raise ConfigError(f"seed {url} matches no allow pattern (or is denied)")

    def allowed(self, url: str) -> bool:
        canon = canonicalize(url)
        return any(p.search(canon) for p in self._allow) and not any(p.search(canon) for p in self._deny)

    @classmethod
    def from_dict(cls, data: Mapping) -> "SiteConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(data) - known
        if extra:
            raise ConfigError(f"unknown site config keys: {', '.join(sorted(extra))}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def to_dict(self) -> dict:
        return {
            "site_id": self.site_id, "kind": self.kind.value, "seed_urls": list(self.seed_urls),
            "allow_patterns": list(self.allow_patterns), "deny_patterns": list(self.deny_patterns),
            "max_depth": self.max_depth, "politeness_delay_ms": self.politeness_delay_ms,
            "max_retries": self.max_retries, "retry_backoff_ms": self.retry_backoff_ms,
            "headers": dict(self.headers),
        }


def load_site_config(path) -> SiteConfig:
    """YAML or JSON (JSON is valid YAML); keys are the field names."""
    data = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping")
    return SiteConfig.from_dict(data)


# -- frontier --------------------------------------------------------------

@dataclass
class Frontier:
    pending: deque = field(default_factory=deque)   # (url, depth)
    visited: set = field(default_factory=set)       # canonical fingerprints, marked at enqueue

    def push(self, url: str, depth: int) -> None:
        self.visited.add(canonicalize(url))
        self.pending.append((url, depth))

    def pop(self) -> tuple[str, int]:
        return self.pending.popleft()

    def __bool__(self):
        return bool(self.pending)


def should_visit(frontier: Frontier, config: SiteConfig, url: str, depth: int) -> bool:
    return (canonicalize(url) not in frontier.visited
            and depth <= config.max_depth
            and config.allowed(url))


# -- clocks ----------------------------------------------------------------

class Clock(Protocol):
    def now(self) -> datetime: ...
    def sleep(self, seconds: float) -> None: ...


class SystemClock:
    def now(self) -> datetime:
        return datetime.now(timezone.utc)

    def sleep(self, seconds: float) -> None:
        if seconds > 0:
            time.sleep(seconds)


class FakeClock:
    """Virtual time: sleeping advances the clock instantly."""

    def __init__(self, start: datetime | None = None):
        self._now = start or datetime(2015, 1, 1, tzinfo=timezone.utc)
        self._lock = threading.Lock()

    def now(self) -> datetime:
        with self._lock:
            return self._now

    def sleep(self, seconds: float) -> None:
        if seconds > 0:
            with self._lock:
                self._now += timedelta(seconds=seconds)


class _HostGate:
    """Spaces request starts on each host by at least the politeness delay."""

    def __init__(self, clock: Clock, delay_ms: int):
        self.clock, self.delay = clock, timedelta(milliseconds=delay_ms)
        self.last: dict[str, datetime] = {}
        self.log: list[tuple[str, datetime]] = []
        self._lock = threading.Lock()

    def enter(self, host: str) -> datetime:
        # callers never hold two requests to one host at once, so waiting outside the lock is safe
        with self._lock:
            last = self.last.get(host)
        if last is not None:
            gap = (last + self.delay - self.clock.now()).total_seconds()
            self.clock.sleep(gap)
        start = self.clock.now()
        with self._lock:
            self.last[host] = start
            self.log.append((host, start))
        return start


# -- fetching --------------------------------------------------------------

class Fetcher(Protocol):
    def fetch(self, url: str, headers: Mapping[str, str]) -> bytes: ...


@dataclass(frozen=True)
class FetchResult:
    url: str
    status: FetchStatus
    body: bytes | None
    fetched_at: datetime
    attempts: int
    error: str = ""

    def __post_init__(self):
        if (self.body is not None) != (self.status is FetchStatus.OK):
            raise ValueError("body must be present exactly when status is OK")
        if self.attempts < 1:
            raise ValueError("attempts must be positive")


def fetch_with_retry(fetcher: Fetcher, url: str, config: SiteConfig, clock: Clock | None = None,
                     gate: _HostGate | None = None) -> FetchResult:
    clock = clock or SystemClock()
    gate = gate or _HostGate(clock, config.politeness_delay_ms)
    host = host_of(url)
    attempt = 0
    while True:
        attempt += 1
        started = gate.enter(host)
        try:
            body = fetcher.fetch(url, config.headers)
        except PermanentFetchError as exc:
            return FetchResult(url, FetchStatus.PERMANENT_FAILURE, None, started, attempt, str(exc))
        except TransientFetchError as exc:
            if attempt > config.max_retries:
                return FetchResult(url, FetchStatus.PERMANENT_FAILURE, None, started, attempt,
                                   f"gave up after {attempt} attempts: {exc}")
            log.info("retrying %s after attempt %d: %s", url, attempt, exc)
            clock.sleep(config.retry_backoff_ms * 2 ** (attempt - 1) / 1000)
            continue
        return FetchResult(url, FetchStatus.OK, bytes(body), started, attempt)


class FixtureFetcher:
    """Serves files from a directory whose ``manifest.json`` maps URL to relative path."""

    def __init__(self, root):
        self.root = Path(root)
        manifest = json.loads((self.root / "manifest.json").read_text(encoding="utf-8"))
        self.pages = {canonicalize(url): rel for url, rel in manifest.items()}

    def fetch(self, url: str, headers: Mapping[str, str] = {}) -> bytes:  # noqa: B006
        rel = self.pages.get(canonicalize(url))
        if rel is None:
            raise PermanentFetchError(f"404 {url}")
        return (self.root / rel).read_bytes()


class HttpFetcher:
    def __init__(self, timeout: float = 30.0):
        import requests
        self._session = requests.Session()
        self._requests = requests
        self.timeout = timeout

    def fetch(self, url: str, headers: Mapping[str, str] = {}) -> bytes:  # noqa: B006
        try:
            resp = self._session.get(url, headers=dict(headers), timeout=self.timeout)
        except (self._requests.ConnectionError, self._requests.Timeout) as exc:
            raise TransientFetchError(str(exc)) from None
        except self._requests.RequestException as exc:
            raise PermanentFetchError(str(exc)) from None
        if resp.status_code == 429 or resp.status_code >= 500:
            raise TransientFetchError(f"HTTP {resp.status_code}")
        if resp.status_code >= 400:
            raise PermanentFetchError(f"HTTP {resp.status_code}")
        return resp.content


# -- crawling --------------------------------------------------------------

LinkExtractor = Callable[[str, bytes], Iterable[str]]


@dataclass
class CrawlResult:
    site_id: str
    fetches: list[FetchResult]
    all_seeds_failed: bool = False
    request_log: list[tuple[str, datetime]] = field(default_factory=list)

    @property
    def pages(self) -> list[tuple[str, bytes, datetime]]:
        return [(f.url, f.body, f.fetched_at) for f in self.fetches if f.status is FetchStatus.OK]


def _expand(frontier: Frontier, config: SiteConfig, result: FetchResult, depth: int,
            link_extractor: LinkExtractor | None) -> None:
    if result.status is not FetchStatus.OK or link_extractor is None:
        return
    for href in link_extractor(result.url, result.body):
        try:
            child = urljoin(result.url, href)
            if should_visit(frontier, config, child, depth + 1):
                frontier.push(child, depth + 1)
        except UrlError:
            log.debug("skipping unusable link %r on %s", href, result.url)


def crawl_site(config: SiteConfig, fetcher: Fetcher, link_extractor: LinkExtractor | None = None,
               clock: Clock | None = None, workers: int = 1) -> CrawlResult:
    """Breadth-first crawl from the seeds (depth 1).

    With ``workers`` > 1 each breadth level is fetched concurrently, one in-flight
    request per host, and results arrive in completion order. ``workers=1`` is
    the deterministic mode.
    """
    if workers < 1:
        raise ValueError("workers must be at least 1")
    clock = clock or SystemClock()
    gate = _HostGate(clock, config.politeness_delay_ms)
    frontier = Frontier()
    for url in config.seed_urls:
        if should_visit(frontier, config, url, 1):
            frontier.push(url, 1)
    seeds = {canonicalize(u) for u in config.seed_urls}
    fetches: list[FetchResult] = []

    if workers == 1:
        while frontier:
            url, depth = frontier.pop()
            res = fetch_with_retry(fetcher, url, config, clock, gate)
            fetches.append(res)
            _expand(frontier, config, res, depth, link_extractor)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            while frontier:
                level = list(frontier.pending)
                frontier.pending.clear()
                by_host: dict[str, list[tuple[str, int]]] = {}
                for url, depth in level:
                    by_host.setdefault(host_of(url), []).append((url, depth))

                def run(items):
                    return [(fetch_with_retry(fetcher, u, config, clock, gate), d) for u, d in items]

                futures = {pool.submit(run, items) for items in by_host.values()}
                while futures:
                    done, futures = wait(futures, return_when=FIRST_COMPLETED)
                    for fut in done:
                        for res, depth in fut.result():
                            fetches.append(res)
                            _expand(frontier, config, res, depth, link_extractor)

    seed_results = [f for f in fetches if canonicalize(f.url) in seeds]
    all_failed = bool(seed_results) and all(f.status is not FetchStatus.OK for f in seed_results)
    if all_failed:
        log.warning("%s: every seed failed permanently", config.site_id)
    return CrawlResult(config.site_id, fetches, all_failed, list(gate.log))


def recrawl(urls: Sequence[str], config: SiteConfig, fetcher: Fetcher, clock: Clock | None = None) -> CrawlResult:
    """Fetch exactly ``urls`` in order, repeats included, with no link expansion."""
    if not urls:
        raise ValueError("recrawl needs at least one URL")
    clock = clock or SystemClock()
    gate = _HostGate(clock, config.politeness_delay_ms)
    fetches = [fetch_with_retry(fetcher, url, config, clock, gate) for url in urls]
    return CrawlResult(config.site_id, fetches, False, list(gate.log))


def write_crawl_summary(result: CrawlResult, path) -> Path:
    """One NDJSON line per fetch, then a closing line with totals and the all-seeds-failed flag."""
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for f in result.fetches:
            row = {"url": f.url, "status": f.status.value, "attempts": f.attempts, "fetched_at": format_utc(f.fetched_at)}
            if f.error:
                row["error"] = f.error
            fh.write(json.dumps(row) + "\n")
        ok = sum(f.status is FetchStatus.OK for f in result.fetches)
        fh.write(json.dumps({"summary": True, "site_id": result.site_id, "fetched": ok,
                             "failed": len(result.fetches) - ok, "all_seeds_failed": result.all_seeds_failed}) + "\n")
    return path
