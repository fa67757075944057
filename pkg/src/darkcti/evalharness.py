"""Metrics and cross-validation protocols.

Aggregates weight each unit (held-out site or fold) by its labeled test support.
Weighting is done in exact rational arithmetic, so identical per-unit metrics
aggregate to exactly that value and unit order never matters.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from darkcti.datamodel import Label, LabeledExample, parse_label

log = logging.getLogger(__name__)

POSITIVE, NEGATIVE = Label.RELEVANT, Label.NOT_RELEVANT

LEAVE_ONE_SITE_OUT = "LEAVE_ONE_SITE_OUT"


class ProtocolError(ValueError):
    """Cross-validation preconditions are not met."""


@dataclass(frozen=True)
class MetricSet:
    precision: float
    recall: float
    f1: float
    support: int
    tp: int
    fp: int
    fn: int
    tn: int
    precision_undefined: bool = False
    recall_undefined: bool = False


def _binary(label) -> Label:
    lab = parse_label(label)
    if lab is Label.UNLABELED:
        raise ValueError("UNLABELED is not a valid class for evaluation")
    return lab


def confusion(y_true: Sequence, y_pred: Sequence) -> tuple[int, int, int, int]:
    """(tp, fp, fn, tn) with RELEVANT as the positive class."""
    if len(y_true) != len(y_pred):
        raise ValueError(f"length mismatch: {len(y_true)} true vs {len(y_pred)} predicted")
    if not y_true:
        raise ValueError("need at least one label")
    tp = fp = fn = tn = 0
    for t, p in zip(y_true, y_pred):
        t_pos = _binary(t) is POSITIVE
        p_pos = _binary(p) is POSITIVE
        if t_pos and p_pos:
            tp += 1
        elif p_pos:
            fp += 1
        elif t_pos:
            fn += 1
        else:
            tn += 1
    return tp, fp, fn, tn


def metrics(tp: int, fp: int, fn: int, tn: int) -> MetricSet:
    """Undefined precision or recall (zero denominator) is reported as 0 and flagged."""
    if min(tp, fp, fn, tn) < 0:
        raise ValueError("confusion counts must be nonnegative")
    support = tp + fp + fn + tn
    if support < 1:
        raise ValueError("support must be at least 1")
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    # equals 2PR/(P+R) but with one rounding
    f1 = 2 * tp / (2 * tp + fp + fn) if tp else 0.0
    return MetricSet(precision, recall, f1, support, tp, fp, fn, tn,
                     precision_undefined=tp + fp == 0, recall_undefined=tp + fn == 0)


def evaluate(y_true: Sequence, y_pred: Sequence) -> MetricSet:
    return metrics(*confusion(y_true, y_pred))


def _exact(m: MetricSet) -> dict[str, Fraction]:
    # rebuilt from the counts so the aggregate carries a single rounding;
    # hand-built sets whose counts disagree with their ratios keep the ratios
    from_counts = {"precision": Fraction(m.tp, m.tp + m.fp) if m.tp + m.fp else Fraction(0),
                   "recall": Fraction(m.tp, m.tp + m.fn) if m.tp + m.fn else Fraction(0),
                   "f1": Fraction(2 * m.tp, 2 * m.tp + m.fp + m.fn) if m.tp else Fraction(0)}
    return {k: v if float(v) == getattr(m, k) else Fraction(getattr(m, k)) for k, v in from_counts.items()}


def weighted_aggregate(units: Sequence[MetricSet]) -> MetricSet:
    if not units:
        raise ValueError("nothing to aggregate")
    total = sum(m.support for m in units)
    avg = lambda name: float(sum(_exact(m)[name] * m.support for m in units) / total)  # noqa: E731
    return MetricSet(
        precision=avg("precision"), recall=avg("recall"), f1=avg("f1"), support=total,
        tp=sum(m.tp for m in units), fp=sum(m.fp for m in units),
        fn=sum(m.fn for m in units), tn=sum(m.tn for m in units),
        precision_undefined=any(m.precision_undefined for m in units),
        recall_undefined=any(m.recall_undefined for m in units),
    )


@dataclass
class CvReport:
    per_unit: dict[str, MetricSet]
    protocol: str
    trainer: str = ""
    skipped: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.per_unit:
            raise ProtocolError("a report needs at least one evaluated unit")

    @property
    def weighted(self) -> MetricSet:
        return weighted_aggregate(list(self.per_unit.values()))


# -- folds -----------------------------------------------------------------

def stratified_folds(labels: Sequence, k: int, seed: int) -> list[np.ndarray]:
    """Shuffle each class, concatenate, deal round-robin. Fold sizes differ by at most 1."""
    if k < 2:
        raise ProtocolError("k must be at least 2")
    labels = [_binary(y) for y in labels]
    if len(labels) < k:
        raise ProtocolError(f"{len(labels)} labeled examples cannot fill {k} folds")
    rng = np.random.default_rng(seed)
    order = []
    for cls in (POSITIVE, NEGATIVE):
        idx = np.array([i for i, y in enumerate(labels) if y is cls], dtype=np.int64)
        order.extend(rng.permutation(idx).tolist())
    folds = [[] for _ in range(k)]
    for pos, i in enumerate(order):
        folds[pos % k].append(i)
    return [np.array(sorted(f), dtype=np.int64) for f in folds]


# -- protocols -------------------------------------------------------------

# A trainer takes (labeled training examples, unlabeled pool) and returns a predictor
# mapping a sequence of examples to labels. Supervised trainers ignore the pool.
Predictor = Callable[[Sequence[LabeledExample]], Sequence[Label]]
Trainer = Callable[[Sequence[LabeledExample], Sequence[LabeledExample]], Predictor]


def describe(trainer) -> str:
    return getattr(trainer, "descriptor", None) or getattr(trainer, "__name__", None) or repr(trainer)


def _classes(examples: Sequence[LabeledExample]) -> set:
    return {ex.label for ex in examples}


def leave_one_site_out(datasets: Mapping[str, Sequence[LabeledExample]], trainer: Trainer) -> CvReport:
    """Hold out each site once; train on the labeled examples of the others.

    Unlabeled examples of the training sites are handed to the trainer as its
    unlabeled pool; nothing from the held-out site reaches training.
    """
    if len(datasets) < 2:
        raise ProtocolError(f"leave-one-site-out needs at least 2 sites, got {len(datasets)}")
    labeled = {s: [ex for ex in exs if ex.label is not Label.UNLABELED] for s, exs in datasets.items()}
    empty = [s for s, exs in labeled.items() if not exs]
    if empty:
        raise ProtocolError(f"sites without labeled examples: {', '.join(sorted(empty))}")

    per_unit, skipped = {}, []
    for held in sorted(datasets):
        train = [ex for s in sorted(datasets) if s != held for ex in labeled[s]]
        pool = [ex for s in sorted(datasets) if s != held for ex in datasets[s] if ex.label is Label.UNLABELED]
        if _classes(train) != {POSITIVE, NEGATIVE}:
            log.warning("skipping held-out site %s: training pool has a single class", held)
            skipped.append(held)
            continue
        predict = trainer(train, pool)
        test = labeled[held]
        per_unit[held] = evaluate([ex.label for ex in test], list(predict(test)))
    if not per_unit:
        raise ProtocolError("every round was skipped")
    return CvReport(per_unit, LEAVE_ONE_SITE_OUT, describe(trainer), skipped)


def kfold(dataset: Sequence[LabeledExample], k: int, trainer: Trainer, seed: int,
          unlabeled: Sequence[LabeledExample] = ()) -> CvReport:
    """Stratified k-fold over the labeled examples; the unlabeled pool is shared by all rounds."""
    labeled = [ex for ex in dataset if ex.label is not Label.UNLABELED]
    pool = list(unlabeled) + [ex for ex in dataset if ex.label is Label.UNLABELED]
    folds = stratified_folds([ex.label for ex in labeled], k, seed)
    per_unit = {}
    for f, test_idx in enumerate(folds):
        test_set = set(test_idx.tolist())
        train = [ex for i, ex in enumerate(labeled) if i not in test_set]
        if _classes(train) != {POSITIVE, NEGATIVE}:
            raise ProtocolError(f"fold {f}: a class is absent from the training split")
        test = [labeled[i] for i in test_idx]
        predict = trainer(train, pool)
        per_unit[f"fold-{f}"] = evaluate([ex.label for ex in test], list(predict(test)))
    return CvReport(per_unit, f"KFOLD({k})", describe(trainer))


# -- report files ----------------------------------------------------------

_ROW_KEYS = ("precision", "recall", "f1", "support", "tp", "fp", "fn", "tn")


def _row(m: MetricSet) -> dict:
    d = asdict(m)
    return {k: d[k] for k in _ROW_KEYS}


def format_table(reports: Mapping[str, CvReport]) -> str:
    """Plain-text precision/recall/F1 table, one line per method."""
    width = max([len("method")] + [len(k) for k in reports])
    lines = [f"{'method':<{width}}  precision  recall     f1  support", "-" * (width + 35)]
    for name, rep in reports.items():
        w = rep.weighted
        lines.append(f"{name:<{width}}  {w.precision:9.4f}  {w.recall:6.4f}  {w.f1:6.4f}  {w.support:7d}")
    return "\n".join(lines) + "\n"


def format_units(report: CvReport) -> str:
    width = max([len("unit")] + [len(u) for u in report.per_unit])
    lines = [f"{report.protocol}  trainer={report.trainer}",
             f"{'unit':<{width}}  precision  recall     f1  support"]
    for unit, m in report.per_unit.items():
        lines.append(f"{unit:<{width}}  {m.precision:9.4f}  {m.recall:6.4f}  {m.f1:6.4f}  {m.support:7d}")
    w = report.weighted
    lines.append(f"{'weighted':<{width}}  {w.precision:9.4f}  {w.recall:6.4f}  {w.f1:6.4f}  {w.support:7d}")
    if report.skipped:
        lines.append(f"skipped: {', '.join(report.skipped)}")
    return "\n".join(lines) + "\n"


def emit_report(report: CvReport, path) -> tuple[Path, Path]:
    """Write ``path`` (NDJSON, one line per unit plus an aggregate line) and a ``.txt`` table beside it."""
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for unit, m in report.per_unit.items():
            fh.write(json.dumps({"unit": unit, **_row(m)}) + "\n")
        fh.write(json.dumps({"aggregate": True, "protocol": report.protocol, "trainer": report.trainer,
                             "skipped": report.skipped, **_row(report.weighted)}) + "\n")
    table = path.with_suffix(".txt")
    table.write_text(format_units(report), encoding="utf-8")
    return path, table


def load_report(path) -> tuple[CvReport, dict]:
    """Returns the report rebuilt from unit lines and the stored aggregate line."""
    units, aggregate = {}, None
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        row = json.loads(line)
        if row.get("aggregate"):
            aggregate = row
            continue
        units[row["unit"]] = metrics(row["tp"], row["fp"], row["fn"], row["tn"])
    if aggregate is None:
        raise ValueError(f"{path}: no aggregate line")
    rep = CvReport(units, aggregate["protocol"], aggregate.get("trainer", ""), aggregate.get("skipped", []))
    return rep, aggregate
