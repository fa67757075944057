"""``darkcti`` command line: crawl, parse, label, train, classify, evaluate, analyze, report.

Every command reads one run config and works inside its ``work_dir``::

    raw/<site>/            fetched pages, pages.ndjson index, crawl_summary.ndjson
    records/market|forum/  parsed records, one NDJSON file per site
    model/                 trained model files
    classified/            records with predicted labels, relevant_urls.txt
    reports/               evaluation reports
    analysis/              user graph, presence histogram, zero-day candidates

Exit codes: 0 success, 2 config error, 3 missing prerequisite, 4 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import shutil
import sys
from dataclasses import replace
from datetime import timedelta
from pathlib import Path

from darkcti import analytics, crawler, evalharness, learners, parsers, textpipe, trainers
from darkcti.config import RunConfig, load_run_config
from darkcti.crawler import ConfigError
from darkcti.datamodel import (
    Label,
    LabelError,
    MarketProduct,
    RecordKind,
    apply_labels,
    format_utc,
    load_label_file,
    load_records,
    save_records,
    to_example,
    to_utc,
)

log = logging.getLogger("darkcti")

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_RUNTIME = 0, 2, 3, 4


class MissingPrerequisite(Exception):
    pass


class RuntimeFailure(Exception):
    pass


# -- work directory layout -------------------------------------------------

def _dir(cfg: RunConfig, *parts) -> Path:
    return cfg.work_dir.joinpath(*parts)


def _record_path(cfg: RunConfig, root: str, kind: RecordKind, site_id: str) -> Path:
    return _dir(cfg, root, kind.value.lower(), f"{site_id}.ndjson")


def _clock(cfg: RunConfig, start=None):
    if cfg.fixed_clock is None:
        return crawler.SystemClock()
    return crawler.FakeClock(start or cfg.fixed_clock)


def _fetcher(entry):
    return crawler.FixtureFetcher(entry.fixture_dir) if entry.fixture_dir else crawler.HttpFetcher()


def _page_file(canonical: str, fetched_at) -> str:
    digest = hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:20]
    return f"{digest}-{fetched_at.strftime('%Y%m%dT%H%M%S%fZ')}.html"


def _read_index(site_dir: Path) -> list[dict]:
    index = site_dir / "pages.ndjson"
    if not index.exists():
        return []
    return [json.loads(line) for line in index.read_text(encoding="utf-8").splitlines() if line.strip()]


def _write_index(site_dir: Path, rows: list[dict]) -> None:
    with (site_dir / "pages.ndjson").open("w", encoding="utf-8", newline="\n") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def _store_pages(site_dir: Path, result: crawler.CrawlResult, rows: list[dict]) -> list[dict]:
    """Add OK fetches to the index; a page with the same URL and time replaces the old one."""
    pages_dir = site_dir / "pages"
    pages_dir.mkdir(parents=True, exist_ok=True)
    by_key = {(r["canonical_url"], r["fetched_at"]): r for r in rows}
    for url, body, fetched_at in result.pages:
        canon = crawler.canonicalize(url)
        name = _page_file(canon, fetched_at)
        (pages_dir / name).write_bytes(body)
        by_key[(canon, format_utc(fetched_at))] = {"url": url, "canonical_url": canon,
                                                   "fetched_at": format_utc(fetched_at), "file": f"pages/{name}"}
    return sorted(by_key.values(), key=lambda r: (r["fetched_at"], r["canonical_url"]))


# -- commands --------------------------------------------------------------

def cmd_crawl(cfg: RunConfig, args) -> int:
    recrawl_urls = None
    if getattr(args, "recrawl", False):
        src = _dir(cfg, "classified", "relevant_urls.txt")
        if not src.exists():
            raise MissingPrerequisite(f"re-crawl needs {src}; run classify first")
        recrawl_urls = [u for u in src.read_text(encoding="utf-8").splitlines() if u.strip()]
    any_ok = False
    for entry in cfg.sites:
        site = entry.site
        site_dir = _dir(cfg, "raw", site.site_id)
        if recrawl_urls is None:
            if site_dir.exists():
                shutil.rmtree(site_dir)
            site_dir.mkdir(parents=True)
            result = crawler.crawl_site(site, _fetcher(entry), parsers.link_extractor(entry.schema),
                                        _clock(cfg), cfg.crawl_workers)
            rows = _store_pages(site_dir, result, [])
            summary = site_dir / "crawl_summary.ndjson"
        else:
            urls = [u for u in recrawl_urls if site.allowed(u)]
            if not urls:
                continue
            rows = _read_index(site_dir)
            start = None
            if cfg.fixed_clock is not None and rows:
                # resume virtual time after the latest stored fetch so samples stay distinct
                start = max(to_utc(r["fetched_at"]) for r in rows) + timedelta(milliseconds=max(site.politeness_delay_ms, 1))
            site_dir.mkdir(parents=True, exist_ok=True)
            result = crawler.recrawl(urls, site, _fetcher(entry), _clock(cfg, start))
            rows = _store_pages(site_dir, result, rows)
            summary = site_dir / "recrawl_summary.ndjson"
        _write_index(site_dir, rows)
        crawler.write_crawl_summary(result, summary)
        ok = len(result.pages)
        any_ok = any_ok or ok > 0
        flag = "  (all seeds failed)" if result.all_seeds_failed else ""
        print(f"{site.site_id}: {ok} fetched, {len(result.fetches) - ok} failed{flag}")
    if not any_ok:
        raise RuntimeFailure("no site returned a single page")
    return EXIT_OK


def _merge_products(products: list[MarketProduct]) -> list[MarketProduct]:
    """Fetches of the same product over time: latest values, earliest first_seen."""
    merged: dict[str, MarketProduct] = {}
    for p in products:
        prev = merged.get(p.url)
        if prev is None:
            merged[p.url] = p
        else:
            first = min(prev.first_seen, p.first_seen)
            last_obs = p if p.last_seen >= prev.last_seen else prev
            merged[p.url] = replace(last_obs, first_seen=first, last_seen=max(prev.last_seen, p.last_seen))
    return list(merged.values())


def cmd_parse(cfg: RunConfig, args) -> int:
    warnings: list[dict] = []
    for entry in cfg.sites:
        site_dir = _dir(cfg, "raw", entry.site.site_id)
        rows = _read_index(site_dir)
        if not rows:
            raise MissingPrerequisite(f"no raw pages at {site_dir / 'pages.ndjson'}; run crawl first")
        records = []
        for row in rows:
            body = (site_dir / row["file"]).read_bytes()
            fetched = to_utc(row["fetched_at"])
            try:
                if entry.schema.kind is RecordKind.MARKET:
                    records += parsers.parse_market_page(body, entry.schema, row["url"], fetched, warnings)
                else:
                    records += parsers.parse_forum_page(body, entry.schema, row["url"], fetched, warnings)
            except parsers.ExtractionError as exc:
                warnings.append({"url": exc.url, "field": exc.field, "message": str(exc)})
        if entry.schema.kind is RecordKind.MARKET:
            records = _merge_products(records)
        else:
            records = parsers.merge_topics(records)
        out = _record_path(cfg, "records", entry.schema.kind, entry.site.site_id)
        out.parent.mkdir(parents=True, exist_ok=True)
        n = save_records(records, out)
        print(f"{entry.site.site_id}: {n} {entry.schema.kind.value.lower()} records")
    _dir(cfg, "records").mkdir(parents=True, exist_ok=True)
    parsers.write_warnings(warnings, _dir(cfg, "records", "warnings.ndjson"))
    if warnings:
        print(f"{len(warnings)} extraction warnings in {_dir(cfg, 'records', 'warnings.ndjson')}")
    return EXIT_OK


def _load_store(cfg: RunConfig, root: str) -> dict[str, list]:
    """site_id -> records from ``root`` (records or classified); every site must be present."""
    out = {}
    for entry in cfg.sites:
        path = _record_path(cfg, root, entry.schema.kind, entry.site.site_id)
        if not path.exists():
            hint = "run parse first" if root == "records" else "run classify first"
            raise MissingPrerequisite(f"records missing: {path}; {hint}")
        out[entry.site.site_id] = load_records(path, entry.schema.kind)
    return out


def cmd_label(cfg: RunConfig, args) -> int:
    if cfg.labels is None:
        raise ConfigError("paths.labels is not set")
    store = _load_store(cfg, "records")
    entries = load_label_file(cfg.labels)
    everything = [r for entry in cfg.sites for r in store[entry.site.site_id]]
    labeled, n = apply_labels(everything, entries)
    pos = 0
    for entry in cfg.sites:
        sid = entry.site.site_id
        count = len(store[sid])
        save_records(labeled[pos:pos + count], _record_path(cfg, "records", entry.schema.kind, sid))
        pos += count
    print(f"applied {n} labels from {cfg.labels}")
    return EXIT_OK


def _examples(store: dict[str, list]) -> dict[str, list]:
    return {site: [to_example(r) for r in recs] for site, recs in store.items()}


def cmd_train(cfg: RunConfig, args) -> int:
    examples = [ex for exs in _examples(_load_store(cfg, "records")).values() for ex in exs]
    train = [ex for ex in examples if ex.label is not Label.UNLABELED]
    pool = [ex for ex in examples if ex.label is Label.UNLABELED]
    if not train:
        raise MissingPrerequisite("no labeled records; run label first")
    if {ex.label for ex in train} != {Label.RELEVANT, Label.NOT_RELEVANT}:
        raise RuntimeFailure("labeled records must include both classes")
    model_dir = _dir(cfg, "model")
    if model_dir.exists():
        shutil.rmtree(model_dir)
    model_dir.mkdir(parents=True)
    hp = dict(cfg.model.hyperparams)
    if cfg.model.grid:
        base = trainers.from_run_config(cfg)
        space = base.pipeline.space(train)
        best, table = learners.grid_search(cfg.model.kind, cfg.model.grid, textpipe.vectorize_many(train, space),
                                           [ex.label for ex in train], cfg.model.grid_folds, cfg.seed)
        with (model_dir / "grid.ndjson").open("w", encoding="utf-8", newline="\n") as fh:
            for row in table:
                fh.write(json.dumps(row, sort_keys=True, default=str) + "\n")
        hp = {**best}
        print(f"grid search picked {json.dumps(best, sort_keys=True)}")
    fit = trainers.from_run_config(cfg, hp)(train, pool)
    fit.save(model_dir)
    print(f"trained {trainers.from_run_config(cfg, hp).descriptor} on {len(train)} labeled"
          f" + {len(pool)} unlabeled examples -> {model_dir}")
    return EXIT_OK


def cmd_classify(cfg: RunConfig, args) -> int:
    model_dir = _dir(cfg, "model")
    try:
        fit = trainers.load_fit(model_dir)
    except trainers.ArtifactError as exc:
        raise MissingPrerequisite(f"{exc}; run train first") from None
    store = _load_store(cfg, "records")
    relevant = []
    for entry in cfg.sites:
        sid = entry.site.site_id
        recs = store[sid]
        todo = [i for i, r in enumerate(recs) if r.label is Label.UNLABELED]
        preds = fit.predict([to_example(recs[i]) for i in todo]) if todo else []
        out = list(recs)
        for i, lab in zip(todo, preds):
            out[i] = replace(recs[i], label=lab)
        path = _record_path(cfg, "classified", entry.schema.kind, sid)
        path.parent.mkdir(parents=True, exist_ok=True)
        save_records(out, path)
        relevant += out
        n_rel = sum(r.label is Label.RELEVANT for r in out)
        print(f"{sid}: {len(todo)} classified, {n_rel} of {len(out)} relevant")
    urls = parsers.relevant_url_list(relevant)
    _dir(cfg, "classified", "relevant_urls.txt").write_text("".join(u + "\n" for u in urls), encoding="utf-8")
    return EXIT_OK


def cmd_evaluate(cfg: RunConfig, args) -> int:
    datasets = _examples(_load_store(cfg, "records"))
    if not any(ex.label is not Label.UNLABELED for exs in datasets.values() for ex in exs):
        raise MissingPrerequisite("no labeled records; run label first")
    trainer = trainers.from_run_config(cfg)
    try:
        if cfg.eval.protocol == evalharness.LEAVE_ONE_SITE_OUT:
            report = evalharness.leave_one_site_out(datasets, trainer)
        else:
            everything = [ex for site in sorted(datasets) for ex in datasets[site]]
            report = evalharness.kfold(everything, cfg.eval.k, trainer, cfg.seed)
    except evalharness.ProtocolError as exc:
        raise ConfigError(f"evaluation precondition failed: {exc}") from None
    out = _dir(cfg, "reports")
    out.mkdir(parents=True, exist_ok=True)
    path, table = evalharness.emit_report(report, out / "evaluation.ndjson")
    print(table.read_text(encoding="utf-8"), end="")
    return EXIT_OK


def cmd_analyze(cfg: RunConfig, args) -> int:
    root = "classified"
    if not _dir(cfg, "classified").exists():
        log.warning("no classified records; analysing the unclassified store")
        root = "records"
    store = _load_store(cfg, root)
    products = [r for s in sorted(store) for r in store[s] if isinstance(r, MarketProduct)]
    topics = [r for s in sorted(store) for r in store[s] if not isinstance(r, MarketProduct)]
    out = _dir(cfg, "analysis")
    out.mkdir(parents=True, exist_ok=True)
    graph = analytics.build_site_graph(products, topics)
    hist = analytics.presence_histogram(graph)
    analytics.export_edges_csv(graph, out / "site_graph.csv")
    analytics.export_histogram_csv(hist, out / "presence_histogram.csv")
    summary = {"users": len(graph.user_nodes), "sites": len(graph.site_nodes),
               "users_on_more_than_two_sites": hist.more_than_two}
    try:
        fit = analytics.fit_power_law(hist)
        summary["power_law"] = {"alpha": fit.alpha, "r_squared": fit.r_squared, "points": fit.points}
    except ValueError as exc:
        summary["power_law"] = {"error": str(exc)}
    terms = analytics.load_zero_day_terms(cfg.analysis.zero_day_terms)
    relevant = [p for p in products if p.label is Label.RELEVANT]
    candidates = analytics.find_zero_day_candidates(relevant, terms)
    analytics.export_candidates_csv(candidates, out / "zero_day_candidates.csv")
    summary["zero_day_candidates"] = len(candidates)
    if graph.user_nodes:
        user = cfg.analysis.ego_user
        if user is None:
            user = min(graph.user_nodes, key=lambda u: (-graph.degree(u), u))
        try:
            ego = analytics.ego_network(graph, user, cfg.analysis.ego_radius)
        except analytics.UnknownUserError:
            raise ConfigError(f"analysis.ego_user {user!r} does not appear in the records") from None
        analytics.export_edges_csv(ego, out / "ego_network.csv")
        summary["ego_network"] = {"user": analytics.canonical_username(user), "radius": cfg.analysis.ego_radius,
                                  "users": len(ego.user_nodes), "sites": len(ego.site_nodes)}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_report(cfg: RunConfig, args) -> int:
    parts = []
    counts = []
    for entry in cfg.sites:
        for root in ("records", "classified"):
            path = _record_path(cfg, root, entry.schema.kind, entry.site.site_id)
            if path.exists():
                recs = load_records(path, entry.schema.kind)
                rel = sum(r.label is Label.RELEVANT for r in recs)
                counts.append(f"{entry.site.site_id:<20} {root:<10} {len(recs):6d} records {rel:6d} relevant")
    if counts:
        parts.append("records\n" + "\n".join(counts) + "\n")
    ev = _dir(cfg, "reports", "evaluation.txt")
    if ev.exists():
        parts.append("evaluation\n" + ev.read_text(encoding="utf-8"))
    summary = _dir(cfg, "analysis", "summary.json")
    if summary.exists():
        parts.append("analysis\n" + summary.read_text(encoding="utf-8"))
        zd = _dir(cfg, "analysis", "zero_day_candidates.csv")
        if zd.exists():
            parts.append("zero-day candidates\n" + zd.read_text(encoding="utf-8"))
    if not parts:
        raise MissingPrerequisite(f"nothing to report under {cfg.work_dir}")
    text = "\n".join(parts)
    out = _dir(cfg, "reports")
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.txt").write_text(text, encoding="utf-8")
    print(text, end="")
    return EXIT_OK


COMMANDS = {
    "crawl": cmd_crawl, "parse": cmd_parse, "label": cmd_label, "train": cmd_train,
    "classify": cmd_classify, "evaluate": cmd_evaluate, "analyze": cmd_analyze, "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="darkcti", description="Darknet product and forum threat-intelligence pipeline.")
    ap.add_argument("--config", required=True, help="run config (YAML)")
    ap.add_argument("--seed", type=int, help="override the config seed")
    ap.add_argument("--fixed-clock", metavar="ISO8601", help="use virtual time starting here (reproducible runs)")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        if name == "crawl":
            p.add_argument("--recrawl", action="store_true",
                           help="fetch classified/relevant_urls.txt again instead of crawling from the seeds")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_run_config(args.config)
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        if args.fixed_clock is not None:
            try:
                cfg = replace(cfg, fixed_clock=to_utc(args.fixed_clock))
            except ValueError as exc:
                raise ConfigError(f"--fixed-clock: {exc}") from None
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, parsers.SchemaError, LabelError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingPrerequisite as exc:
        print(f"missing prerequisite: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except RuntimeFailure as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001
        log.debug("unhandled error", exc_info=True)
        print(f"failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
