"""Run configuration for the command-line pipeline.

One YAML file describes the sites, text pipeline, model, semi-supervised
method, evaluation protocol and output location. Relative paths resolve
against the config file's directory and must exist at load time.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from datetime import datetime
from pathlib import Path
from typing import Any, Mapping

import yaml

from darkcti.crawler import ConfigError, SiteConfig, load_site_config
from darkcti.datamodel import to_utc
from darkcti.evalharness import LEAVE_ONE_SITE_OUT
from darkcti.learners import ModelKind
from darkcti.parsers import ExtractionSchema, SchemaError, load_schema, shipped_schema
from darkcti.textpipe import load_stop_words

SEMISUP_METHODS = ("NONE", "LABEL_PROP", "CO_TRAIN")
PROTOCOLS = (LEAVE_ONE_SITE_OUT, "KFOLD")


@dataclass(frozen=True)
class PipelineConfig:
    n_min: int = 3
    n_max: int = 7
    min_df: int = 2
    stop_words: str | None = "default"   # "default" = shipped list, None = keep every word, else a path

    def __post_init__(self):
        if not 1 <= self.n_min <= self.n_max:
            raise ConfigError("pipeline needs 1 <= n_min <= n_max")
        if self.min_df < 1:
            raise ConfigError("pipeline.min_df must be positive")

    def stop_word_set(self) -> frozenset[str]:
        if self.stop_words is None:
            return frozenset()
        return load_stop_words(None if self.stop_words == "default" else self.stop_words)


@dataclass(frozen=True)
class ModelConfig:
    kind: str = "LINEAR_SVM"
    hyperparams: Mapping[str, Any] = field(default_factory=dict)
    grid: Mapping[str, list] | None = None
    grid_folds: int = 5

    def __post_init__(self):
        try:
            object.__setattr__(self, "kind", ModelKind(str(self.kind).upper()).value)
        except ValueError:
            raise ConfigError(f"unknown model kind {self.kind!r}") from None


@dataclass(frozen=True)
class SemisupConfig:
    method: str = "NONE"
    kernel: Mapping[str, Any] = field(default_factory=lambda: {"type": "KNN", "k": 10})
    threshold: float = 0.7
    combine: str = "mean"
    tol: float = 1e-6

    def __post_init__(self):
        method = str(self.method).upper()
        if method not in SEMISUP_METHODS:
            raise ConfigError(f"semisup.method must be one of {', '.join(SEMISUP_METHODS)}")
        object.__setattr__(self, "method", method)
        if self.combine not in ("mean", "or"):
            raise ConfigError("semisup.combine must be 'mean' or 'or'")


@dataclass(frozen=True)
class EvalConfig:
    protocol: str = LEAVE_ONE_SITE_OUT
    k: int = 5

    def __post_init__(self):
        protocol = str(self.protocol).upper()
        if protocol not in PROTOCOLS:
            raise ConfigError(f"eval.protocol must be one of {', '.join(PROTOCOLS)}")
        object.__setattr__(self, "protocol", protocol)


@dataclass(frozen=True)
class AnalysisConfig:
    zero_day_terms: str | None = None
    ego_user: str | None = None
    ego_radius: int = 1


@dataclass(frozen=True)
class SiteEntry:
    site: SiteConfig
    schema: ExtractionSchema
    fixture_dir: Path | None = None   # absent means fetch over HTTP


@dataclass(frozen=True)
class RunConfig:
    sites: tuple[SiteEntry, ...]
    work_dir: Path
    labels: Path | None = None
    seed: int = 0
    fixed_clock: datetime | None = None
    crawl_workers: int = 1
    pipeline: PipelineConfig = PipelineConfig()
    model: ModelConfig = ModelConfig()
    semisup: SemisupConfig = SemisupConfig()
    eval: EvalConfig = EvalConfig()
    analysis: AnalysisConfig = AnalysisConfig()

    def site(self, site_id: str) -> SiteEntry:
        for s in self.sites:
            if s.site.site_id == site_id:
                return s
        raise KeyError(site_id)


_TOP_KEYS = {"sites", "paths", "seed", "fixed_clock", "crawl_workers", "pipeline", "model", "semisup", "eval", "analysis"}


def _section(cls, data, name):
    data = data or {}
    if not isinstance(data, Mapping):
        raise ConfigError(f"{name} must be a mapping")
    extra = set(data) - set(cls.__dataclass_fields__)
    if extra:
        raise ConfigError(f"unknown keys in {name}: {', '.join(sorted(extra))}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"{name}: {exc}") from None


def _existing(base: Path, value, what: str) -> Path:
    path = (base / value).resolve() if not Path(value).is_absolute() else Path(value)
    if not path.exists():
        raise ConfigError(f"{what} not found: {path}")
    return path


def _site_entry(base: Path, raw, i: int) -> SiteEntry:
    if not isinstance(raw, Mapping) or "site" not in raw or "schema" not in raw:
        raise ConfigError(f"sites[{i}] needs 'site' and 'schema'")
    extra = set(raw) - {"site", "schema", "fixture_dir"}
    if extra:
        raise ConfigError(f"unknown keys in sites[{i}]: {', '.join(sorted(extra))}")
    site = raw["site"]
    site = SiteConfig.from_dict(site) if isinstance(site, Mapping) else load_site_config(_existing(base, site, "site config"))
    schema = raw["schema"]
    try:
        if isinstance(schema, Mapping):
            schema = ExtractionSchema.from_dict(schema)
        elif str(schema).startswith("shipped:"):
            schema = shipped_schema(str(schema).split(":", 1)[1])
        else:
            schema = load_schema(_existing(base, schema, "schema"))
    except (SchemaError, FileNotFoundError) as exc:
        raise ConfigError(f"sites[{i}]: {exc}") from None
    if schema.kind is not site.kind:
        raise ConfigError(f"sites[{i}]: schema kind {schema.kind.value} does not match site kind {site.kind.value}")
    # records always carry the site id of the crawl config
    schema = replace(schema, site_id=site.site_id)
    fixture = raw.get("fixture_dir")
    return SiteEntry(site, schema, _existing(base, fixture, "fixture directory") if fixture else None)


def parse_run_config(data: Mapping, base_dir=".") -> RunConfig:
    base = Path(base_dir).resolve()
    if not isinstance(data, Mapping):
        raise ConfigError("run config must be a mapping")
    extra = set(data) - _TOP_KEYS
    if extra:
        raise ConfigError(f"unknown top-level keys: {', '.join(sorted(extra))}")
    raw_sites = data.get("sites") or []
    if not raw_sites:
        raise ConfigError("sites must list at least one site")
    sites = tuple(_site_entry(base, s, i) for i, s in enumerate(raw_sites))
    ids = [s.site.site_id for s in sites]
    if len(set(ids)) != len(ids):
        raise ConfigError("site ids must be unique")
    paths = data.get("paths") or {}
    extra = set(paths) - {"work_dir", "labels"}
    if extra:
        raise ConfigError(f"unknown keys in paths: {', '.join(sorted(extra))}")
    work = Path(paths.get("work_dir", "work"))
    work = work if work.is_absolute() else base / work
    labels = _existing(base, paths["labels"], "label file") if paths.get("labels") else None
    pipeline = _section(PipelineConfig, data.get("pipeline"), "pipeline")
    if pipeline.stop_words not in (None, "default"):
        pipeline = replace(pipeline, stop_words=str(_existing(base, pipeline.stop_words, "stop word file")))
    analysis = _section(AnalysisConfig, data.get("analysis"), "analysis")
    if analysis.zero_day_terms:
        analysis = replace(analysis, zero_day_terms=str(_existing(base, analysis.zero_day_terms, "zero-day terms file")))
    fixed = data.get("fixed_clock")
    try:
        fixed = to_utc(fixed) if fixed is not None else None
        seed = int(data.get("seed", 0))
        workers = int(data.get("crawl_workers", 1))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    if workers < 1:
        raise ConfigError("crawl_workers must be at least 1")
    return RunConfig(
        sites=sites, work_dir=work, labels=labels, seed=seed, fixed_clock=fixed, crawl_workers=workers,
        pipeline=pipeline,
        model=_section(ModelConfig, data.get("model"), "model"),
        semisup=_section(SemisupConfig, data.get("semisup"), "semisup"),
        eval=_section(EvalConfig, data.get("eval"), "eval"),
        analysis=analysis,
    )


def load_run_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return parse_run_config(data, path.parent)
