from datetime import datetime, timezone
from pathlib import Path

import pytest

from darkcti.datamodel import ForumPost, ForumTopic, Label, LabeledExample, MarketProduct

FIXTURES = Path(__file__).parent / "fixtures"
T0 = datetime(2016, 3, 1, 12, 0, tzinfo=timezone.utc)


def product(site="m1", url="http://m1.onion/item/1", title="exploit kit", desc="fresh exploit kit",
            vendor="vendor", **kw) -> MarketProduct:
    kw.setdefault("first_seen", T0)
    kw.setdefault("last_seen", T0)
    return MarketProduct(site_id=site, url=url, item_title=title, item_description=desc, vendor_name=vendor, **kw)


def topic(site="f1", topic_id="t1", title="topic", author="alice", posts=(), **kw) -> ForumTopic:
    posts = tuple(p if isinstance(p, ForumPost) else ForumPost(post_id=f"{topic_id}-{i}", post_content=p, post_author=author)
                  for i, p in enumerate(posts))
    return ForumTopic(site_id=site, topic_id=topic_id, topic_content=title, topic_author=author, posts=posts, **kw)


def example(title, body="", label=Label.UNLABELED, site="s"):
    return LabeledExample(site, title, body, label)


@pytest.fixture
def fixtures_dir():
    return FIXTURES


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, ok: bool, detail: str) -> bool:
    line = f"[criterion {number:>2}] {'PASS' if ok else 'FAIL'}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
