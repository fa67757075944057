"""Cross-site user graph, multi-presence statistics, CVE mentions and zero-day candidates.

Users are linked across sites only by exact canonical username equality.
"""

from __future__ import annotations

import csv
import logging
from collections import Counter, deque
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from darkcti.datamodel import _LOOSE_CVE, ForumTopic, MarketProduct, RecordKind, normalize_cve
from darkcti.textpipe import clean_text

log = logging.getLogger(__name__)


class Role(str, Enum):
    VENDOR = "VENDOR"
    MEMBER = "MEMBER"


class UnknownUserError(KeyError):
    pass


def canonical_username(raw: str) -> str:
    name = (raw or "").strip().casefold()
    if not name:
        raise ValueError("username is empty")
    return name


# -- site graph ------------------------------------------------------------

@dataclass
class SiteGraph:
    """Bipartite users x sites. ``edges`` maps (username, site_id, role) to an activity count."""

    user_nodes: set[str] = field(default_factory=set)
    site_nodes: dict[str, RecordKind] = field(default_factory=dict)
    edges: dict[tuple[str, str, Role], int] = field(default_factory=dict)

    def add(self, user: str, site: str, kind: RecordKind, role: Role, weight: int = 1) -> None:
        if weight < 1:
            raise ValueError("edge weight must be at least 1")
        self.user_nodes.add(user)
        self.site_nodes[site] = kind
        key = (user, site, role)
        self.edges[key] = self.edges.get(key, 0) + weight

    def sites_of(self, user: str) -> set[str]:
        return {s for u, s, _ in self.edges if u == user}

    def users_of(self, site: str) -> set[str]:
        return {u for u, s, _ in self.edges if s == site}

    def degree(self, user: str) -> int:
        return len(self.sites_of(user))

    def edge_list(self) -> list[tuple[str, str, str, int]]:
        return sorted((u, s, r.value, w) for (u, s, r), w in self.edges.items())

    def subgraph(self, users: Iterable[str], sites: Iterable[str]) -> "SiteGraph":
        users, sites = set(users), set(sites)
        return SiteGraph(
            user_nodes=users,
            site_nodes={s: self.site_nodes[s] for s in sites},
            edges={k: w for k, w in self.edges.items() if k[0] in users and k[1] in sites},
        )


def build_site_graph(products: Sequence[MarketProduct] = (), topics: Sequence[ForumTopic] = ()) -> SiteGraph:
    """Vendor edges weigh products listed; member edges weigh topics plus posts authored."""
    g = SiteGraph()

    def add(raw, site, kind, role):
        try:
            user = canonical_username(raw)
        except ValueError:
            log.warning("skipping record with empty username on %s", site)
            return
        g.add(user, site, kind, role)

    for p in products:
        add(p.vendor_name, p.site_id, RecordKind.MARKET, Role.VENDOR)
    for t in topics:
        add(t.topic_author, t.site_id, RecordKind.FORUM, Role.MEMBER)
        for post in t.posts:
            add(post.post_author, t.site_id, RecordKind.FORUM, Role.MEMBER)
    return g


@dataclass(frozen=True)
class PresenceHistogram:
    counts: dict[int, int]        # number of distinct sites -> number of users
    more_than_two: int

    @property
    def total(self) -> int:
        return sum(self.counts.values())


def presence_histogram(graph: SiteGraph) -> PresenceHistogram:
    degrees = Counter(len(sites) for sites in _sites_by_user(graph).values())
    counts = dict(sorted(degrees.items()))
    return PresenceHistogram(counts, sum(n for s, n in counts.items() if s > 2))


def _sites_by_user(graph: SiteGraph) -> dict[str, set[str]]:
    out = {u: set() for u in graph.user_nodes}
    for u, s, _ in graph.edges:
        out[u].add(s)
    return out


@dataclass(frozen=True)
class PowerLawFit:
    alpha: float
    r_squared: float
    points: int


def fit_power_law(histogram: PresenceHistogram | Mapping[int, int]) -> PowerLawFit:
    """Least squares on log(frequency) against log(site count); alpha is minus the slope."""
    counts = histogram.counts if isinstance(histogram, PresenceHistogram) else histogram
    pts = sorted((s, f) for s, f in counts.items() if f > 0 and s > 0)
    if len(pts) < 3:
        raise ValueError(f"need at least 3 site counts with nonzero frequency, got {len(pts)}")
    x = np.log([s for s, _ in pts])
    y = np.log([f for _, f in pts])
    slope, intercept = np.polyfit(x, y, 1)
    ss_res = float(np.sum((y - (slope * x + intercept)) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    # a flat histogram is fit perfectly by a zero slope
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 1e-12 else (1.0 if ss_res < 1e-12 else 0.0)
    return PowerLawFit(float(-slope), r2, len(pts))


def ego_network(graph: SiteGraph, username: str, radius: int = 1) -> SiteGraph:
    """Everything within ``radius`` bipartite hops of the user, with all edges among those nodes."""
    user = canonical_username(username)
    if user not in graph.user_nodes:
        raise UnknownUserError(username)
    if radius < 0:
        raise ValueError("radius must be nonnegative")
    sites_by_user = _sites_by_user(graph)
    users_by_site: dict[str, set[str]] = {}
    for u, s, _ in graph.edges:
        users_by_site.setdefault(s, set()).add(u)
    users, sites = {user}, set()
    queue = deque([(("u", user), 0)])
    while queue:
        (side, node), dist = queue.popleft()
        if dist == radius:
            continue
        nbrs = sites_by_user[node] if side == "u" else users_by_site[node]
        seen = sites if side == "u" else users
        for n in sorted(nbrs - seen):
            seen.add(n)
            queue.append((("s" if side == "u" else "u", n), dist + 1))
    return graph.subgraph(users, sites)


# -- CVEs and zero-days ----------------------------------------------------

def extract_cves(text: str) -> list[str]:
    out: dict[str, None] = {}
    for m in _LOOSE_CVE.finditer(text or ""):
        out.setdefault(normalize_cve(m.group(0)), None)
    return list(out)


def load_zero_day_terms(path=None) -> tuple[str, ...]:
    if path is None:
        text = resources.files("darkcti").joinpath("data/zero_day_terms.txt").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    return tuple(line.strip() for line in text.splitlines() if line.strip() and not line.startswith("#"))


@dataclass(frozen=True)
class ZeroDayCandidate:
    product: MarketProduct
    matched_terms: tuple[str, ...]
    price_btc: float | None
    cve_ids: tuple[str, ...]

    def __post_init__(self):
        if not self.matched_terms:
            raise ValueError("a candidate needs at least one matched term")


def find_zero_day_candidates(products: Sequence[MarketProduct], terms: Sequence[str] | None = None) -> list[ZeroDayCandidate]:
    """Products (already restricted to RELEVANT by the caller) whose cleaned title or
    description contains a zero-day term as a whole-word sequence. Highest price first,
    unpriced last, input order among ties."""
    terms = load_zero_day_terms() if terms is None else tuple(terms)
    cleaned_terms = [(t, " ".join(clean_text(t))) for t in terms]
    found = []
    for p in products:
        texts = [" " + " ".join(clean_text(x)) + " " for x in (p.item_title, p.item_description)]
        hits = tuple(t for t, ct in cleaned_terms if ct and any(f" {ct} " in x for x in texts))
        if hits:
            cves = tuple(dict.fromkeys(p.cve_ids + tuple(extract_cves(p.item_title + " " + p.item_description))))
            found.append(ZeroDayCandidate(p, hits, p.price_btc, cves))
    return sorted(found, key=lambda c: (c.price_btc is None, -(c.price_btc or 0.0)))


# -- exports ---------------------------------------------------------------

def _write_csv(path, header, rows) -> Path:
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return path


def export_edges_csv(graph: SiteGraph, path) -> Path:
    return _write_csv(path, ("username", "site_id", "role", "weight"), graph.edge_list())


def export_histogram_csv(hist: PresenceHistogram, path) -> Path:
    return _write_csv(path, ("site_count", "users"), sorted(hist.counts.items()))


def export_candidates_csv(candidates: Sequence[ZeroDayCandidate], path) -> Path:
    rows = [(c.product.site_id, c.product.url, c.product.item_title, "" if c.price_btc is None else repr(c.price_btc),
             "|".join(c.matched_terms), "|".join(c.cve_ids)) for c in candidates]
    return _write_csv(path, ("site_id", "url", "item_title", "price_btc", "matched_terms", "cve_ids"), rows)
