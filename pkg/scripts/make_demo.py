#!/usr/bin/env python3
"""Build a self-contained demo workspace from a synthetic corpus.

Writes fixture web sites (one directory per market or forum), a site config
per site, a label file covering a fraction of the records and a run config.
Then run, for example::

    darkcti --config demo/run.yaml --fixed-clock 2016-01-01T00:00:00Z crawl
"""

from __future__ import annotations

import argparse
from pathlib import Path

import yaml

from darkcti import synthgen
from darkcti.datamodel import save_label_file


def build(out: Path, seed: int, n_sites: int, products: int, n_forums: int, topics: int, fraction: float,
          semisup: str = "NONE") -> Path:
    out.mkdir(parents=True, exist_ok=True)
    spec = synthgen.CorpusSpec(n_sites=n_sites, products_per_site=products, n_forums=n_forums,
                               topics_per_forum=topics, seed=seed, zero_day_rate=0.2)
    corpus = synthgen.generate(spec)
    synthgen.write_corpus(corpus, out / "truth")
    sites = []
    for site_id, items in sorted(corpus.products.items()):
        seed_url = synthgen.render_market_site(items, out / "fixtures" / site_id)
        sites.append((site_id, "MARKET", seed_url, "shipped:synth_market"))
    for site_id, items in sorted(corpus.topics.items()):
        seed_url = synthgen.render_forum_site(items, out / "fixtures" / site_id)
        sites.append((site_id, "FORUM", seed_url, "shipped:synth_forum"))
    entries = []
    for site_id, kind, seed_url, schema in sites:
        cfg = {"site_id": site_id, "kind": kind, "seed_urls": [seed_url],
               "allow_patterns": [rf"^http://{site_id}\.onion/"], "deny_patterns": [],
               "max_depth": 20 if kind == "MARKET" else 10, "politeness_delay_ms": 250,
               "max_retries": 2, "retry_backoff_ms": 100, "headers": {}}
        (out / "sites").mkdir(exist_ok=True)
        (out / "sites" / f"{site_id}.yaml").write_text(yaml.safe_dump(cfg, sort_keys=False), encoding="utf-8")
        entries.append({"site": f"sites/{site_id}.yaml", "schema": schema, "fixture_dir": f"fixtures/{site_id}"})
    save_label_file(synthgen.sample_labels(corpus.truth(), fraction, seed), out / "labels.csv")
    run = {
        "seed": seed,
        "paths": {"work_dir": "work", "labels": "labels.csv"},
        "sites": entries,
        "pipeline": {"n_min": 3, "n_max": 7, "min_df": 2, "stop_words": "default"},
        "model": {"kind": "LINEAR_SVM", "hyperparams": {}},
        "semisup": {"method": semisup, "threshold": 0.7, "kernel": {"type": "KNN", "k": 10}},
        "eval": {"protocol": "LEAVE_ONE_SITE_OUT"},
        "analysis": {"ego_radius": 1},
    }
    path = out / "run.yaml"
    path.write_text(yaml.safe_dump(run, sort_keys=False), encoding="utf-8")
    return path


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("demo"))
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--sites", type=int, default=4)
    ap.add_argument("--products", type=int, default=100)
    ap.add_argument("--forums", type=int, default=1)
    ap.add_argument("--topics", type=int, default=30)
    ap.add_argument("--label-fraction", type=float, default=0.5)
    ap.add_argument("--semisup", default="NONE", choices=("NONE", "LABEL_PROP", "CO_TRAIN"))
    a = ap.parse_args(argv)
    path = build(a.out, a.seed, a.sites, a.products, a.forums, a.topics, a.label_fraction, a.semisup)
    print(f"wrote {path}")


if __name__ == "__main__":
    main()
