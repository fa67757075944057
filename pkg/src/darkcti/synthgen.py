"""Seeded synthetic marketplace/forum corpora with known labels.

Class words come from disjoint pools built as stem x suffix variants, so
unseen inflections and misspellings still share character n-grams with
training words. A shared neutral pool adds class-independent filler.
"""

from __future__ import annotations

import html
import json
import random
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Sequence

from darkcti.datamodel import (
    ForumPost,
    ForumTopic,
    Label,
    LabelEntry,
    MarketProduct,
    save_label_file,
    save_records,
)

RELEVANT_STEMS = (
    "hack", "exploit", "keylog", "botnet", "malwar", "ransom", "phish", "trojan", "rootkit",
    "ddos", "backdoor", "payload", "shellcod", "inject", "brutefor", "spoof", "sniff", "crypter",
    "bypass", "crack", "spywar", "worm", "virus", "steal", "skimm", "vuln", "zeroday", "rat",
    "obfuscat", "sqlmap", "xss", "firmwar", "jailbreak", "keygen", "passw", "wifipwn", "webshell",
    "scanner", "bruter", "dropper",
)
RELEVANT_SUFFIXES = ("", "er", "ers", "ing", "ed", "s", "kit", "tool", "z", "pro")

IRRELEVANT_STEMS = (
    "cocain", "heroin", "mdma", "xanax", "cannabis", "kush", "weed", "ketamin", "lsd", "opium",
    "pistol", "rifl", "ammo", "glock", "tobacc", "cigar", "vap", "watch", "rolex", "gold",
    "silver", "jewel", "ebook", "recip", "fitnes", "diet", "steroid", "viagr", "oxycod", "meth",
    "shroom", "hashish", "tramadol", "valium", "adderal", "perfum", "sneaker", "handbag", "passport",
    "cocoa",
)
IRRELEVANT_SUFFIXES = ("", "a", "e", "es", "y", "ish", "gram", "pack", "o", "line")

NEUTRAL_WORDS = (
    "sale", "new", "best", "cheap", "price", "quality", "fast", "shipping", "free", "stealth",
    "escrow", "bulk", "discount", "offer", "premium", "guaranteed", "worldwide", "delivery",
    "order", "item", "product", "listing", "bonus", "original", "top", "grade", "deal",
    "limited", "stock", "instant", "service", "support", "trusted", "reliable", "update",
    "version", "full", "edition", "private", "lifetime", "access", "tested", "working", "today",
    "customer", "refund", "policy", "contact", "message", "available", "amount", "unit",
    "express", "tracking", "reship", "days", "week", "month", "once", "again",
)

USER_SYLLABLES = ("dark", "shadow", "zero", "ghost", "cyber", "black", "silent", "night", "crypto",
                  "venom", "byte", "root", "hex", "null", "ice", "wolf", "raven", "onion", "void", "kid")

BASE_TIME = datetime(2015, 4, 1, tzinfo=timezone.utc)


class CorpusSpecError(ValueError):
    pass


def _variants(stems, suffixes) -> tuple[str, ...]:
    return tuple(dict.fromkeys(s + x for s in stems for x in suffixes))


@dataclass(frozen=True)
class CorpusSpec:
    n_sites: int = 10
    products_per_site: int = 200
    positive_rate: float = 0.13
    vocab_relevant: tuple[str, ...] = field(default_factory=lambda: _variants(RELEVANT_STEMS, RELEVANT_SUFFIXES))
    vocab_irrelevant: tuple[str, ...] = field(default_factory=lambda: _variants(IRRELEVANT_STEMS, IRRELEVANT_SUFFIXES))
    vocab_neutral: tuple[str, ...] = NEUTRAL_WORDS
    misspell_rate: float = 0.1
    dual_view_mode: bool = False
    seed: int = 0
    title_words: tuple[int, int] = (3, 7)
    body_words: tuple[int, int] = (10, 25)
    class_word_rate: float = 0.3
    zipf_exponent: float = 1.0
    n_forums: int = 0
    topics_per_forum: int = 50
    n_users: int = 200
    zero_day_rate: float = 0.0   # share of relevant products advertised as a 0day with a CVE id

    def __post_init__(self):
        if self.n_sites < 1 or self.products_per_site < 1:
            raise CorpusSpecError("n_sites and products_per_site must be positive")
        if not 0.0 < self.positive_rate < 1.0:
            raise CorpusSpecError("positive_rate must lie in (0, 1)")
        if not 0.0 <= self.misspell_rate <= 1.0:
            raise CorpusSpecError("misspell_rate must lie in [0, 1]")
        if not 0.0 <= self.zero_day_rate <= 1.0:
            raise CorpusSpecError("zero_day_rate must lie in [0, 1]")
        if not 0.0 < self.class_word_rate <= 1.0:
            raise CorpusSpecError("class_word_rate must lie in (0, 1]")
        pools = [set(self.vocab_relevant), set(self.vocab_irrelevant), set(self.vocab_neutral)]
        if any(len(p) < (2 if self.dual_view_mode else 1) for p in pools[:2]):
            raise CorpusSpecError("word pools are too small")
        if pools[0] & pools[1] or pools[0] & pools[2] or pools[1] & pools[2]:
            raise CorpusSpecError("word pools must be disjoint")
        for lo, hi in (self.title_words, self.body_words):
            if not 1 <= lo <= hi:
                raise CorpusSpecError("word count ranges need 1 <= lo <= hi")


def dual_view_spec(seed: int = 0, **overrides) -> CorpusSpec:
    """One 2000-product site whose title and body pools are disjoint.

    Bodies are long enough that either half of the vocabulary usually carries
    class evidence on its own, which is the setting co-training assumes.
    """
    base = dict(n_sites=1, products_per_site=2000, misspell_rate=0.1, dual_view_mode=True,
                body_words=(20, 40), zipf_exponent=0.5, seed=seed)
    return CorpusSpec(**{**base, **overrides})


def misspelled_spec(seed: int = 0, **overrides) -> CorpusSpec:
    """One 2000-product site with one in five words carrying a typo."""
    return CorpusSpec(**{**dict(n_sites=1, products_per_site=2000, misspell_rate=0.2, seed=seed), **overrides})


def market_spec(seed: int = 0, **overrides) -> CorpusSpec:
    """Ten markets of 200 products each."""
    return CorpusSpec(**{**dict(n_sites=10, products_per_site=200, seed=seed), **overrides})


@dataclass
class SyntheticCorpus:
    spec: CorpusSpec
    products: dict[str, list[MarketProduct]]   # site_id -> products carrying ground-truth labels
    topics: dict[str, list[ForumTopic]]
    # clean (pre-misspelling) title/body words per record key, for recoverability checks
    clean_words: dict[tuple[str, str], tuple[list[str], list[str]]] = field(repr=False, default_factory=dict)

    def all_products(self) -> list[MarketProduct]:
        return [p for site in sorted(self.products) for p in self.products[site]]

    def all_topics(self) -> list[ForumTopic]:
        return [t for site in sorted(self.topics) for t in self.topics[site]]

    def truth(self) -> list[LabelEntry]:
        out = [LabelEntry(p.site_id, p.url, p.label) for p in self.all_products()]
        out += [LabelEntry(t.site_id, t.topic_id, t.label) for t in self.all_topics()]
        return out


class _Sampler:
    """Zipf-weighted draws from a pool in a seeded random rank order."""

    def __init__(self, pool: Sequence[str], rng: random.Random, exponent: float):
        self.words = list(pool)
        rng.shuffle(self.words)
        self.weights = [1.0 / (r + 1) ** exponent for r in range(len(self.words))]

    def draw(self, rng: random.Random, k: int) -> list[str]:
        return rng.choices(self.words, weights=self.weights, k=k)


_LETTERS = "abcdefghijklmnopqrstuvwxyz"


def misspell(word: str, rng: random.Random) -> str:
    """One character-level substitution, deletion or duplication."""
    if len(word) < 3:
        return word
    i = rng.randrange(len(word))
    op = rng.choice(("sub", "del", "dup"))
    if op == "sub":
        c = rng.choice([x for x in _LETTERS if x != word[i]])
        return word[:i] + c + word[i + 1:]
    if op == "del":
        return word[:i] + word[i + 1:]
    return word[:i] + word[i] + word[i:]


class _Generator:
    def __init__(self, spec: CorpusSpec):
        self.spec = spec
        self.rng = random.Random(spec.seed)
        self.all_pool_words = set(spec.vocab_relevant) | set(spec.vocab_irrelevant) | set(spec.vocab_neutral)
        rel, irr = sorted(spec.vocab_relevant), sorted(spec.vocab_irrelevant)
        if spec.dual_view_mode:
            # title and body draw class words from disjoint halves of each class pool
            pools = {
                ("title", True): rel[0::2], ("body", True): rel[1::2],
                ("title", False): irr[0::2], ("body", False): irr[1::2],
            }
        else:
            pools = {(ctx, cls): (rel if cls else irr) for ctx in ("title", "body") for cls in (True, False)}
        self.class_samplers = {k: _Sampler(v, self.rng, spec.zipf_exponent) for k, v in sorted(pools.items())}
        self.neutral = _Sampler(sorted(spec.vocab_neutral), self.rng, 0.5)

    def words(self, ctx: str, relevant: bool) -> tuple[list[str], list[str]]:
        """(clean words, emitted words) for one context of one record."""
        lo, hi = self.spec.title_words if ctx == "title" else self.spec.body_words
        n = self.rng.randint(lo, hi)
        n_class = max(1, sum(self.rng.random() < self.spec.class_word_rate for _ in range(n)))
        clean = self.class_samplers[(ctx, relevant)].draw(self.rng, n_class)
        clean += self.neutral.draw(self.rng, n - n_class)
        self.rng.shuffle(clean)
        emitted = []
        for w in clean:
            if self.rng.random() < self.spec.misspell_rate:
                for _ in range(10):
                    m = misspell(w, self.rng)
                    # an edit must not land on another pool word
                    if m not in self.all_pool_words:
                        w = m
                        break
            emitted.append(w)
        return clean, emitted


def _usernames(n: int, rng: random.Random) -> list[str]:
    names = set()
    while len(names) < n:
        names.add(f"{rng.choice(USER_SYLLABLES)}{rng.choice(USER_SYLLABLES)}{rng.randrange(100)}")
    return sorted(names)


def _presence(users: list[str], sites: list[str], rng: random.Random) -> dict[str, list[str]]:
    """Users per site with a heavy-tailed number of sites per user; every site gets a user."""
    by_site: dict[str, list[str]] = {s: [] for s in sites}
    weights = [1.0 / s ** 2.0 for s in range(1, len(sites) + 1)]
    for u in users:
        k = rng.choices(range(1, len(sites) + 1), weights=weights)[0]
        for s in rng.sample(sites, k):
            by_site[s].append(u)
    for s in sites:
        if not by_site[s]:
            by_site[s].append(rng.choice(users))
    return by_site


def generate(spec: CorpusSpec) -> SyntheticCorpus:
    gen = _Generator(spec)
    rng = gen.rng
    markets = [f"market-{i + 1:02d}" for i in range(spec.n_sites)]
    forums = [f"forum-{i + 1:02d}" for i in range(spec.n_forums)]
    users = _usernames(spec.n_users, rng)
    presence = _presence(users, markets + forums, rng)
    products: dict[str, list[MarketProduct]] = {}
    topics: dict[str, list[ForumTopic]] = {}
    clean_words = {}
    for site in markets:
        out = []
        for i in range(spec.products_per_site):
            relevant = rng.random() < spec.positive_rate
            ct, title = gen.words("title", relevant)
            cb, body = gen.words("body", relevant)
            cves: tuple[str, ...] = ()
            if relevant and spec.zero_day_rate and rng.random() < spec.zero_day_rate:
                cves = (f"CVE-{rng.randrange(2010, 2017)}-{rng.randrange(1, 9999):04d}",)
                title = title + ["0day"]
                body = body + list(cves)
            url = f"http://{site}.onion/item/{i + 1}"
            seen = BASE_TIME + timedelta(minutes=i)
            out.append(MarketProduct(
                site_id=site, url=url, item_title=" ".join(title), item_description=" ".join(body),
                vendor_name=rng.choice(presence[site]),
                shipping_details=rng.choice(("Worldwide", "EU only", "US only", "Digital delivery")),
                item_reviews=tuple(rng.choice(("great", "fast delivery", "works", "A+ vendor"))
                                   for _ in range(rng.randrange(3))),
                items_sold=rng.randrange(500), items_left=rng.randrange(100),
                ratings=round(rng.uniform(3.0, 5.0), 1), price_btc=round(rng.lognormvariate(-3.0, 1.5), 4),
                cve_ids=cves, first_seen=seen, last_seen=seen,
                label=Label.RELEVANT if relevant else Label.NOT_RELEVANT,
            ))
            clean_words[(site, url)] = (ct, cb)
        products[site] = out
    for site in forums:
        out = []
        for i in range(spec.topics_per_forum):
            relevant = rng.random() < spec.positive_rate
            ct, title = gen.words("title", relevant)
            posts, all_clean = [], []
            for j in range(rng.randint(1, 5)):
                cb, body = gen.words("body", relevant)
                all_clean += cb
                posts.append(ForumPost(
                    post_id=f"{i + 1}-{j + 1}", post_content=" ".join(body), post_author=rng.choice(presence[site]),
                    author_status=rng.choice((None, "Member", "Vendor", "Admin")), reputation=rng.randrange(-5, 200),
                    timestamp=BASE_TIME + timedelta(hours=i, minutes=j),
                ))
            tid = f"t{i + 1}"
            out.append(ForumTopic(site_id=site, topic_id=tid, topic_content=" ".join(title),
                                  topic_author=posts[0].post_author, topic_interest=rng.randrange(1000),
                                  posts=tuple(posts), label=Label.RELEVANT if relevant else Label.NOT_RELEVANT))
            clean_words[(site, tid)] = (ct, all_clean)
        topics[site] = out
    return SyntheticCorpus(spec, products, topics, clean_words)


def sample_labels(entries: Sequence[LabelEntry], fraction: float, seed: int) -> list[LabelEntry]:
    """Per-site random subset of ``fraction`` of the entries (at least one per site)."""
    rng = random.Random(seed)
    by_site: dict[str, list[LabelEntry]] = {}
    for e in entries:
        by_site.setdefault(e.site_id, []).append(e)
    out = []
    for site in sorted(by_site):
        group = by_site[site]
        k = max(1, round(fraction * len(group)))
        out += sorted(rng.sample(group, k), key=lambda e: group.index(e))
    return out


def unlabeled(records):
    """Copies of the records with labels removed."""
    return [replace(r, label=Label.UNLABELED) for r in records]


def write_corpus(corpus: SyntheticCorpus, out_dir) -> dict[str, Path]:
    """Unlabeled NDJSON record files plus a ground-truth label sidecar."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    if corpus.products:
        paths["products"] = out / "products.ndjson"
        save_records(unlabeled(corpus.all_products()), paths["products"])
    if corpus.topics:
        paths["topics"] = out / "topics.ndjson"
        save_records(unlabeled(corpus.all_topics()), paths["topics"])
    paths["truth"] = out / "ground_truth.csv"
    save_label_file(corpus.truth(), paths["truth"])
    return paths


# -- fixture sites ---------------------------------------------------------

_PAGE = "<!DOCTYPE html>\n<html><head><title>{title}</title></head><body>\n{body}\n</body></html>\n"
LISTING_PAGE_SIZE = 20


def _e(text) -> str:
    return html.escape(str(text), quote=True)


def render_product(p: MarketProduct) -> str:
    reviews = "".join(f"<li>{_e(r)}</li>" for r in p.item_reviews)
    parts = [
        f'<h1 class="title">{_e(p.item_title)}</h1>',
        f'<div class="desc">{_e(p.item_description)}</div>',
        f'<span class="vendor">{_e(p.vendor_name)}</span>',
        f'<div class="shipping">{_e(p.shipping_details)}</div>',
    ]
    if p.price_btc is not None:
        parts.append(f'<span class="price">BTC {p.price_btc}</span>')
    if p.items_sold is not None:
        parts.append(f'<span class="sold">Sold: {p.items_sold}</span>')
    if p.items_left is not None:
        parts.append(f'<span class="left">{p.items_left} left</span>')
    if p.ratings is not None:
        parts.append(f'<span class="rating">{p.ratings}/5</span>')
    parts.append(f'<ul class="reviews">{reviews}</ul>')
    return _PAGE.format(title=_e(p.item_title), body='<div class="product">\n' + "\n".join(parts) + "\n</div>")


def render_topic_page(t: ForumTopic, posts: Sequence[ForumPost], next_href: str | None) -> str:
    items = []
    for p in posts:
        status = f'<span class="status">{_e(p.author_status)}</span>' if p.author_status else ""
        rep = f'<span class="rep">Reputation: {p.reputation}</span>' if p.reputation is not None else ""
        when = f'<time>{p.timestamp.strftime("%Y-%m-%dT%H:%M:%SZ")}</time>' if p.timestamp else ""
        items.append(f'<div class="post" data-post-id="{_e(p.post_id)}"><span class="author">{_e(p.post_author)}</span>'
                     f'{status}{rep}{when}<div class="content">{_e(p.post_content)}</div></div>')
    nxt = f'<a class="next" href="{_e(next_href)}">next</a>' if next_href else ""
    interest = f'<span class="views">Views: {t.topic_interest}</span>' if t.topic_interest is not None else ""
    body = (f'<div class="topic" data-topic-id="{_e(t.topic_id)}"><h1 class="topic-title">{_e(t.topic_content)}</h1>'
            f'<span class="topic-author">{_e(t.topic_author)}</span>{interest}\n' + "\n".join(items) + f"\n{nxt}</div>")
    return _PAGE.format(title=_e(t.topic_content), body=body)


def _listing(links: Sequence[tuple[str, str]], link_class: str, next_href: str | None) -> str:
    rows = "\n".join(f'<li><a class="{link_class}" href="{_e(h)}">{_e(text)}</a></li>' for h, text in links)
    nxt = f'<a class="next" href="{_e(next_href)}">next</a>' if next_href else ""
    return _PAGE.format(title="listing", body=f"<ul>\n{rows}\n</ul>\n{nxt}")


def _write_site(root: Path, pages: dict[str, str]) -> Path:
    """Write pages under ``root`` plus manifest.json mapping each URL to its file."""
    root.mkdir(parents=True, exist_ok=True)
    manifest = {}
    for i, (url, text) in enumerate(pages.items()):
        name = f"page-{i:05d}.html"
        (root / name).write_text(text, encoding="utf-8")
        manifest[url] = name
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True), encoding="utf-8")
    return root


def render_market_site(products: Sequence[MarketProduct], root) -> str:
    """Paginated listing pages linking to one page per product. Returns the seed URL."""
    site = products[0].site_id
    base = f"http://{site}.onion"
    pages = {}
    n_pages = max(1, -(-len(products) // LISTING_PAGE_SIZE))
    for k in range(n_pages):
        chunk = products[k * LISTING_PAGE_SIZE:(k + 1) * LISTING_PAGE_SIZE]
        nxt = f"{base}/listing?page={k + 2}" if k + 1 < n_pages else None
        url = f"{base}/listing?page={k + 1}"
        pages[url] = _listing([(p.url, p.item_title) for p in chunk], "product-link", nxt)
    for p in products:
        pages[p.url] = render_product(p)
    _write_site(Path(root), pages)
    return f"{base}/listing?page=1"


FORUM_PAGE_SIZE = 3


def render_forum_site(topics: Sequence[ForumTopic], root) -> str:
    """Topic index plus topic pages of FORUM_PAGE_SIZE posts each. Returns the seed URL."""
    site = topics[0].site_id
    base = f"http://{site}.onion"
    pages = {}
    links = [(f"{base}/topic/{t.topic_id}?page=1", t.topic_content) for t in topics]
    pages[f"{base}/index"] = _listing(links, "topic-link", None)
    for t in topics:
        chunks = [t.posts[i:i + FORUM_PAGE_SIZE] for i in range(0, max(1, len(t.posts)), FORUM_PAGE_SIZE)]
        for k, chunk in enumerate(chunks):
            nxt = f"{base}/topic/{t.topic_id}?page={k + 2}" if k + 1 < len(chunks) else None
            pages[f"{base}/topic/{t.topic_id}?page={k + 1}"] = render_topic_page(t, chunk, nxt)
    _write_site(Path(root), pages)
    return f"{base}/index"
