"""Acceptance suite. Each test prints one PASS/FAIL line for its criterion."""

import random
import time
from fractions import Fraction

import numpy as np
import pytest
import scipy.sparse as sp

import experiments
from conftest import FIXTURES, T0, example, product, record_criterion, topic
from darkcti import analytics, evalharness, semisup
from darkcti.crawler import FakeClock, FetchStatus, SiteConfig, crawl_site, fetch_with_retry
from darkcti.datamodel import ForumPost, Label, save_records
from darkcti.parsers import load_schema, parse_forum_page, parse_market_page
from darkcti.semisup import KnnKernel, SimilarityGraph
from darkcti.textpipe import char_ngrams
from test_crawler import GraphFetcher, lines
from test_cli import PIPELINE, make_demo, run, tree_digest

R, N = Label.RELEVANT, Label.NOT_RELEVANT
SEEDS = range(10)


def verdict(number, ok, detail):
    assert record_criterion(number, ok, detail), detail


def test_criterion_01_ngram_oracle():
    t = time.perf_counter()
    exact = char_ngrams("hacker", 3, 3) == {"hac": 1, "ack": 1, "cke": 1, "ker": 1}
    rng = random.Random(1)
    bad = 0
    for _ in range(10_000):
        n = rng.randint(1, 7)
        word = "".join(rng.choices("abcdefghijklmnopqrstuvwxyz0", k=rng.randint(n, 20)))
        bad += sum(char_ngrams(word, n, n).values()) != len(word) - n + 1
    secs = time.perf_counter() - t
    verdict(1, exact and bad == 0 and secs < 1.0,
            f"hacker grams exact={exact}, count violations={bad}/10000, {secs:.2f}s")


def _oracle(y_true, y_pred):
    tp = sum(t is R and p is R for t, p in zip(y_true, y_pred))
    fp = sum(t is N and p is R for t, p in zip(y_true, y_pred))
    fn = sum(t is R and p is N for t, p in zip(y_true, y_pred))
    p = Fraction(tp, tp + fp) if tp + fp else Fraction(0)
    r = Fraction(tp, tp + fn) if tp + fn else Fraction(0)
    f = 2 * p * r / (p + r) if p + r else Fraction(0)
    return tp, fp, fn, float(p), float(r), float(f)


def test_criterion_02_metric_oracle():
    t = time.perf_counter()
    rng = random.Random(2)
    mismatches = 0
    for _ in range(1000):
        n = rng.randint(1, 20)
        y_true = [rng.choice((R, N)) for _ in range(n)]
        y_pred = [rng.choice((R, N)) for _ in range(n)]
        m = evalharness.evaluate(y_true, y_pred)
        mismatches += (m.tp, m.fp, m.fn, m.precision, m.recall, m.f1) != _oracle(y_true, y_pred)
    secs = time.perf_counter() - t
    verdict(2, mismatches == 0 and secs < 1.0, f"{mismatches}/1000 mismatches, {secs:.2f}s")


def _graph(edges, n, labeled):
    W = sp.lil_matrix((n, n))
    for i, j in edges:
        W[i, j] = W[j, i] = 1.0
    return SimilarityGraph(W.tocsr(), labeled, KnnKernel(1))


def test_criterion_03_label_propagation():
    t = time.perf_counter()
    path = semisup.label_propagation(_graph([(0, 2), (2, 3), (3, 1)], 4, 2), [R, N])
    path_err = float(np.max(np.abs(path.scores[2:] - [2 / 3, 1 / 3])))
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(3, 31))
        l = int(rng.integers(2, n))
        order = rng.permutation(n)
        edges = [(int(order[i]), int(order[i + 1])) for i in range(n - 1)]  # random spanning path
        edges += [(int(a), int(b)) for a, b in rng.integers(0, n, size=(n, 2)) if a != b]
        y = [R, N] + [R if rng.random() < 0.5 else N for _ in range(l - 2)]
        g = _graph(edges, n, l)
        diff = np.max(np.abs(semisup.label_propagation(g, y).scores - semisup.harmonic_solution(g, y)))
        worst = max(worst, float(diff))
    secs = time.perf_counter() - t
    verdict(3, path_err < 1e-6 and worst < 1e-5 and secs < 10.0,
            f"path error {path_err:.1e}, worst iterative vs harmonic {worst:.1e} on 100 graphs, {secs:.2f}s")


@pytest.mark.slow
def test_criterion_04_cotraining_direction():
    t = time.perf_counter()
    wins, rows = 0, []
    for seed in SEEDS:
        pair = experiments.cotrain_vs_supervised(seed)
        ok = pair.other.recall >= pair.base.recall and pair.base.precision - pair.other.precision <= 0.10
        wins += ok
        rows.append(f"{seed}:{pair.base.recall:.3f}->{pair.other.recall:.3f}{'' if ok else '!'}")
    secs = time.perf_counter() - t
    verdict(4, wins >= 8 and secs < 300,
            f"{wins}/10 seeds with CT recall >= SVM recall and precision drop <= 0.10 "
            f"[{' '.join(rows)}], {secs:.0f}s")


@pytest.mark.slow
def test_criterion_05_ngrams_beat_words():
    t = time.perf_counter()
    wins, gaps = 0, []
    for seed in SEEDS:
        pair = experiments.ngrams_vs_words(seed)
        gap = pair.other.f1 - pair.base.f1
        wins += gap >= 0.03
        gaps.append(f"{gap:+.3f}")
    secs = time.perf_counter() - t
    verdict(5, wins >= 8 and secs < 300,
            f"{wins}/10 seeds with char-(3,7) F1 >= word F1 + 0.03 [{' '.join(gaps)}], {secs:.0f}s")


@pytest.mark.slow
def test_criterion_06_market_lomo_quality():
    t = time.perf_counter()
    rep = experiments.market_lomo(0)
    secs = time.perf_counter() - t
    verdict(6, rep.weighted.f1 >= 0.85 and len(rep.per_unit) == 10 and secs < 300,
            f"weighted F1 {rep.weighted.f1:.3f} over {len(rep.per_unit)} held-out sites, {secs:.0f}s")


def test_criterion_07_lomo_protocol():
    data = {
        "a": [example("exploit", "", R, "a"), example("exploit", "", N, "a"), example("benign", "", N, "a")],
        "b": [example("exploit", "", R, "b"), example("benign", "", R, "b")],
        "c": [example("exploit", "", R, "c"), example("benign", "", N, "c"), example("benign", "", N, "c"),
              example("exploit", "", R, "c"), example("benign", "", R, "c")],
    }
    held_out = []

    def trainer(train, pool):
        held_out.extend(set(data) - {ex.source_site for ex in train})
        return lambda test: [R if "exploit" in ex.title_text else N for ex in test]

    w = evalharness.leave_one_site_out(data, trainer).weighted
    # a: P 1/2 R 1 F 2/3 (n=3); b: P 1 R 1/2 F 2/3 (n=2); c: P 1 R 2/3 F 4/5 (n=5)
    hand = (float(Fraction(17, 20)), float(Fraction(11, 15)), float(Fraction(11, 15)))
    once = sorted(held_out) == ["a", "b", "c"]
    exact = (w.precision, w.recall, w.f1) == hand and w.support == 10
    verdict(7, once and exact, f"held out {sorted(held_out)}, weighted P/R/F1 "
            f"{w.precision:.4f}/{w.recall:.4f}/{w.f1:.4f} vs hand 0.8500/0.7333/0.7333")


def test_criterion_08_crawler():
    a, b, c = "http://s.onion/a", "http://s.onion/b", "http://s.onion/c"
    cfg = lambda **kw: SiteConfig(site_id="s", kind="MARKET", seed_urls=(a,), **kw)  # noqa: E731
    cyc = GraphFetcher({a: [b], b: [c], c: [a]})
    crawl_site(cfg(max_depth=10, politeness_delay_ms=0), cyc, lines, FakeClock())

    flaky = GraphFetcher({a: []}, failures={a: 2})
    res = fetch_with_retry(flaky, a, cfg(max_retries=3, retry_backoff_ms=100), FakeClock())

    kids = [f"http://s.onion/k{i}" for i in range(5)]
    polite = crawl_site(cfg(max_depth=2, politeness_delay_ms=750),
                        GraphFetcher({a: kids, **{k: [] for k in kids}}), lines, FakeClock())
    times = [t for _, t in polite.request_log]
    gap = min((y - x).total_seconds() for x, y in zip(times, times[1:]))
    ok = len(cyc.calls) == 3 and res.status is FetchStatus.OK and res.attempts == 3 and gap >= 0.75
    verdict(8, ok, f"cycle fetches={len(cyc.calls)}, retry status={res.status.value} attempts={res.attempts}, "
            f"min politeness gap {gap * 1000:.0f} ms (delay 750 ms)")


def test_criterion_09_parsing_goldens(tmp_path):
    golden = FIXTURES / "golden"
    market = parse_market_page((golden / "market_page.html").read_bytes(),
                               load_schema(golden / "market_schema.yaml"), "http://goldmarket.onion/listing/1", T0)
    save_records(market, tmp_path / "market.ndjson")
    market_ok = (tmp_path / "market.ndjson").read_bytes() == (golden / "market_expected.ndjson").read_bytes()

    forum = parse_forum_page((golden / "forum_page.html").read_bytes(), load_schema(golden / "forum_schema.yaml"),
                             "http://goldforum.onion/topic/77", T0)
    save_records(forum, tmp_path / "forum.ndjson")
    forum_ok = (tmp_path / "forum.ndjson").read_bytes() == (golden / "forum_expected.ndjson").read_bytes()

    cves = analytics.extract_cves("MS15-010/CVE 2015-0057")
    verdict(9, market_ok and forum_ok and cves == ["CVE-2015-0057"],
            f"market golden identical={market_ok}, forum golden identical={forum_ok}, cve_ids={cves}")


def test_criterion_10_analytics():
    table5 = [product(url="http://m1.onion/ie", title="Internet Explorer 11 Remote Code Execution 0day",
                      price_btc=20.4676),
              product(url="http://m1.onion/android", title="Android WebView 0day RCE", price_btc=40.8956),
              product(url="http://m1.onion/kl", title="keylogger", desc="plain keylogger")]
    prices = [c.price_btc for c in analytics.find_zero_day_candidates(table5)]

    prods = [product(site=f"market-{i % 7}", url=f"http://m{i % 7}.onion/{i}", vendor="DarkVendor")
             for i in range(82)]
    forum = [topic(site="forum-1", author="alice",
                   posts=(ForumPost(post_id="p1", post_content="hi", post_author="darkvendor"),))]
    ego = analytics.ego_network(analytics.build_site_graph(prods, forum), "darkvendor", 1)

    alpha = analytics.fit_power_law({s: 10_000 / s ** 2 for s in range(1, 9)}).alpha
    ok = prices == [40.8956, 20.4676] and len(ego.user_nodes) == 1 and len(ego.site_nodes) == 8 \
        and 1.9 <= alpha <= 2.1
    verdict(10, ok, f"zero-day prices {prices}, ego {len(ego.user_nodes)} user + {len(ego.site_nodes)} sites, "
            f"alpha {alpha:.4f}")


def test_criterion_11_cli_reproducible(tmp_path):
    t = time.perf_counter()
    digests, codes = [], []
    for name in ("first", "second"):
        config = make_demo(tmp_path / name)
        codes.append([run(config, c) for c in PIPELINE])
        digests.append(tree_digest(tmp_path / name / "work"))
    secs = time.perf_counter() - t
    same = digests[0] == digests[1]
    ok = same and codes == [[0] * len(PIPELINE)] * 2 and len(digests[0]) > 0 and secs < 600
    verdict(11, ok, f"{len(digests[0])} output files, identical={same}, exit codes {codes[0]}, {secs:.0f}s")
