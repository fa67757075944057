import json
import threading
from datetime import timedelta

import pytest
from hypothesis import given
from hypothesis import strategies as st

from darkcti.crawler import (
    ConfigError,
    FakeClock,
    FetchResult,
    FetchStatus,
    FixtureFetcher,
    Frontier,
    PermanentFetchError,
    SiteConfig,
    TransientFetchError,
    UrlError,
    canonicalize,
    crawl_site,
    fetch_with_retry,
    load_site_config,
    recrawl,
    should_visit,
    write_crawl_summary,
)
from darkcti.datamodel import RecordKind


class GraphFetcher:
    """Pages are their own out-links, newline separated."""

    def __init__(self, links, failures=None, permanent=()):
        self.links = {canonicalize(k): v for k, v in links.items()}
        self.failures = {canonicalize(k): n for k, n in (failures or {}).items()}
        self.permanent = {canonicalize(u) for u in permanent}
        self.calls = []
        self._lock = threading.Lock()

    def fetch(self, url, headers={}):  # noqa: B006
        c = canonicalize(url)
        with self._lock:
            self.calls.append(c)
            if c in self.permanent or c not in self.links:
                raise PermanentFetchError(f"404 {url}")
            if self.failures.get(c, 0) > 0:
                self.failures[c] -= 1
                raise TransientFetchError("503")
        return "\n".join(self.links[c]).encode()


def lines(url, body):
    return [l for l in body.decode().split("\n") if l]


def cfg(seeds=("http://s.onion/a",), **kw):
    kw.setdefault("politeness_delay_ms", 0)
    return SiteConfig(site_id="s", kind="MARKET", seed_urls=tuple(seeds), **kw)


# -- urls ------------------------------------------------------------------

def test_canonicalize_example():
    assert canonicalize("HTTP://Site.onion/a?b=2&a=1#x") == "http://site.onion/a?a=1&b=2"


@pytest.mark.parametrize("url,expected", [
    ("http://site.onion:80/x/", "http://site.onion/x"),
    ("https://site.onion:443", "https://site.onion/"),
    ("http://site.onion:8080/", "http://site.onion:8080/"),
    ("http://site.onion/a/b?z=1&z=0&a=", "http://site.onion/a/b?a=&z=1&z=0"),
])
def test_canonicalize_rules(url, expected):
    assert canonicalize(url) == expected


@pytest.mark.parametrize("bad", ["not a url", "/relative/path", "", "http://", "http://host:99999/"])
def test_canonicalize_rejects(bad):
    with pytest.raises(UrlError):
        canonicalize(bad)


@given(st.sampled_from(["http", "HTTPS"]), st.from_regex(r"[A-Za-z0-9]{1,8}\.onion", fullmatch=True),
       st.lists(st.from_regex(r"[a-z0-9]{1,5}", fullmatch=True), max_size=3),
       st.dictionaries(st.from_regex(r"[a-z]{1,3}", fullmatch=True), st.from_regex(r"[a-z0-9]{0,3}", fullmatch=True),
                       max_size=3), st.booleans())
def test_canonicalize_idempotent(scheme, host, segs, query, slash):
    url = f"{scheme}://{host}/" + "/".join(segs) + ("/" if slash else "")
    if query:
        url += "?" + "&".join(f"{k}={v}" for k, v in query.items())
    once = canonicalize(url)
    assert canonicalize(once) == once


# -- config ----------------------------------------------------------------

def test_site_config_validation():
    with pytest.raises(ConfigError):
        cfg(max_depth=0)
    with pytest.raises(ConfigError):
        cfg(seeds=())
    with pytest.raises(ConfigError):
        cfg(allow_patterns=(r"^http://other\.onion/",))
    with pytest.raises(ConfigError):
        cfg(retry_backoff_ms=0)
    with pytest.raises(ConfigError):
        SiteConfig.from_dict({"site_id": "s", "kind": "MARKET", "seed_urls": ["http://s.onion/"], "speed": 1})
    assert cfg().kind is RecordKind.MARKET


def test_site_config_file_round_trip(tmp_path):
    c = cfg(deny_patterns=("logout",), headers={"Cookie": "x"})
    path = tmp_path / "site.yaml"
    path.write_text(json.dumps(c.to_dict()))
    assert load_site_config(path).to_dict() == c.to_dict()


# -- should_visit ----------------------------------------------------------

def test_should_visit_cases():
    c = cfg(max_depth=2, deny_patterns=("logout",))
    f = Frontier()
    assert should_visit(f, c, "http://s.onion/new", 1)
    assert not should_visit(f, c, "http://s.onion/new", 3)
    assert not should_visit(f, c, "http://s.onion/logout", 1)
    f.push("http://s.onion/new", 1)
    assert not should_visit(f, c, "HTTP://S.onion/new#top", 1)


# -- fetch_with_retry ------------------------------------------------------

def test_retry_then_success_with_backoff():
    fetcher = GraphFetcher({"http://s.onion/a": []}, failures={"http://s.onion/a": 2})
    clock = FakeClock()
    t0 = clock.now()
    res = fetch_with_retry(fetcher, "http://s.onion/a", cfg(max_retries=3, retry_backoff_ms=100), clock)
    assert res.status is FetchStatus.OK and res.attempts == 3
    # waits 100 ms then 200 ms
    assert clock.now() - t0 == timedelta(milliseconds=300)


def test_no_retries_allowed():
    fetcher = GraphFetcher({"http://s.onion/a": []}, failures={"http://s.onion/a": 1})
    res = fetch_with_retry(fetcher, "http://s.onion/a", cfg(max_retries=0), FakeClock())
    assert res.status is FetchStatus.PERMANENT_FAILURE and res.attempts == 1 and res.body is None


def test_permanent_failure_not_retried():
    fetcher = GraphFetcher({})
    res = fetch_with_retry(fetcher, "http://s.onion/a", cfg(max_retries=5), FakeClock())
    assert res.status is FetchStatus.PERMANENT_FAILURE and res.attempts == 1
    assert len(fetcher.calls) == 1


def test_fetch_result_body_invariant():
    clock = FakeClock()
    with pytest.raises(ValueError):
        FetchResult("http://s.onion/", FetchStatus.OK, None, clock.now(), 1)
    with pytest.raises(ValueError):
        FetchResult("http://s.onion/", FetchStatus.PERMANENT_FAILURE, b"x", clock.now(), 1)


# -- crawl_site ------------------------------------------------------------

A, B, C = "http://s.onion/a", "http://s.onion/b", "http://s.onion/c"


def test_cycle_fetched_once_each():
    fetcher = GraphFetcher({A: [B], B: [C], C: [A]})
    res = crawl_site(cfg(max_depth=10), fetcher, lines, FakeClock())
    assert [f.url for f in res.fetches] == [A, B, C]
    assert len(fetcher.calls) == 3


def test_max_depth_one_only_seeds():
    fetcher = GraphFetcher({A: [B, C], B: [], C: []})
    res = crawl_site(cfg(max_depth=1), fetcher, lines, FakeClock())
    assert [f.url for f in res.fetches] == [A]


def test_star_eleven_fetches():
    kids = [f"http://s.onion/k{i}" for i in range(10)]
    fetcher = GraphFetcher({A: kids, **{k: [] for k in kids}})
    res = crawl_site(cfg(max_depth=2), fetcher, lines, FakeClock())
    assert len(res.fetches) == 11 and len(res.pages) == 11


def test_relative_links_and_foreign_hosts():
    fetcher = GraphFetcher({A: ["b", "http://other.onion/x", "#frag", "/c?x=1"], B: [], "http://s.onion/c?x=1": []})
    c = cfg(allow_patterns=(r"^http://s\.onion/",), max_depth=3)
    res = crawl_site(c, fetcher, lines, FakeClock())
    assert [f.url for f in res.fetches] == [A, B, "http://s.onion/c?x=1"]


def test_all_seeds_failed_flagged(tmp_path):
    res = crawl_site(cfg(seeds=(A, B)), GraphFetcher({}), lines, FakeClock())
    assert res.pages == [] and res.all_seeds_failed
    path = write_crawl_summary(res, tmp_path / "summary.ndjson")
    rows = [json.loads(l) for l in path.read_text().splitlines()]
    assert [r["status"] for r in rows[:-1]] == ["PERMANENT_FAILURE"] * 2
    assert set(rows[0]) == {"url", "status", "attempts", "fetched_at", "error"}
    assert rows[-1]["all_seeds_failed"] is True and rows[-1]["fetched"] == 0


def test_politeness_spacing_per_host():
    kids = [f"http://s.onion/k{i}" for i in range(5)] + [f"http://t.onion/k{i}" for i in range(5)]
    fetcher = GraphFetcher({A: kids, **{k: [] for k in kids}})
    c = cfg(max_depth=2, politeness_delay_ms=750)
    res = crawl_site(c, fetcher, lines, FakeClock())
    starts = {}
    for host, t in res.request_log:
        starts.setdefault(host, []).append(t)
    assert set(starts) == {"s.onion", "t.onion"}
    for ts in starts.values():
        assert all(b - a >= timedelta(milliseconds=750) for a, b in zip(ts, ts[1:]))


def test_crawl_deterministic_single_worker():
    graph = {A: [B, C], B: [C, "http://s.onion/d"], C: [A], "http://s.onion/d": []}
    one = crawl_site(cfg(max_depth=5), GraphFetcher(graph), lines, FakeClock())
    two = crawl_site(cfg(max_depth=5), GraphFetcher(graph), lines, FakeClock())
    assert [(f.url, f.fetched_at) for f in one.fetches] == [(f.url, f.fetched_at) for f in two.fetches]


def test_concurrent_crawl_same_pages_and_polite():
    hosts = [f"h{i}.onion" for i in range(4)]
    seed = "http://h0.onion/"
    kids = [f"http://{h}/p{j}" for h in hosts for j in range(4)]
    graph = {seed: kids, **{k: [] for k in kids}}
    c = SiteConfig("s", "MARKET", (seed,), max_depth=2, politeness_delay_ms=200)
    res = crawl_site(c, GraphFetcher(graph), lines, FakeClock(), workers=4)
    assert sorted(f.url for f in res.fetches) == sorted([seed] + kids)
    per_host = {}
    for host, t in res.request_log:
        per_host.setdefault(host, []).append(t)
    for ts in per_host.values():
        assert all(b - a >= timedelta(milliseconds=200) for a, b in zip(ts, ts[1:]))


@given(st.dictionaries(st.integers(0, 9), st.lists(st.integers(0, 9), max_size=4), min_size=1))
def test_crawl_terminates_without_duplicates(adj):
    url = lambda i: f"http://s.onion/p{i}"  # noqa: E731
    graph = {url(i): [url(j) for j in out] for i, out in adj.items()}
    seed = url(min(adj))
    res = crawl_site(cfg(seeds=(seed,), max_depth=20), GraphFetcher(graph), lines, FakeClock())
    canon = [canonicalize(f.url) for f in res.fetches]
    assert len(canon) == len(set(canon))


# -- recrawl ---------------------------------------------------------------

def test_recrawl_exact_urls():
    fetcher = GraphFetcher({A: [B], B: [C], C: []})
    res = recrawl([A, C], cfg(), fetcher, FakeClock())
    assert [f.url for f in res.fetches] == [A, C]
    assert fetcher.calls == [canonicalize(A), canonicalize(C)]


def test_recrawl_duplicates_fetched_twice():
    fetcher = GraphFetcher({A: []})
    clock = FakeClock()
    res = recrawl([A, A], cfg(politeness_delay_ms=1000), fetcher, clock)
    assert len(res.fetches) == 2
    assert res.fetches[1].fetched_at - res.fetches[0].fetched_at >= timedelta(seconds=1)


def test_recrawl_failure_isolated():
    fetcher = GraphFetcher({A: [], C: []})
    res = recrawl([A, B, C], cfg(), fetcher, FakeClock())
    assert [f.status for f in res.fetches] == [FetchStatus.OK, FetchStatus.PERMANENT_FAILURE, FetchStatus.OK]


def test_recrawl_needs_urls():
    with pytest.raises(ValueError):
        recrawl([], cfg(), GraphFetcher({}))


# -- fixture fetcher -------------------------------------------------------

def test_fixture_fetcher(tmp_path):
    (tmp_path / "p.html").write_text("<html>hi</html>")
    (tmp_path / "manifest.json").write_text(json.dumps({"http://S.onion/page/": "p.html"}))
    f = FixtureFetcher(tmp_path)
    assert f.fetch("http://s.onion/page") == b"<html>hi</html>"
    with pytest.raises(PermanentFetchError):
        f.fetch("http://s.onion/missing")
