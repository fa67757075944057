import json
import random
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import example
from darkcti import evalharness as eh
from darkcti.datamodel import Label
from darkcti.evalharness import MetricSet, ProtocolError

R, N, U = Label.RELEVANT, Label.NOT_RELEVANT, Label.UNLABELED
MARKET_SIZES = [439, 1329, 455, 4018, 876, 497, 491, 764, 2014, 600]


def constant(label):
    def trainer(train, pool):
        return lambda test: [label] * len(test)
    trainer.descriptor = f"CONST({label.value})"
    return trainer


def test_confusion_hand_count():
    assert eh.confusion([R, R, N, N, R], [R, N, N, R, R]) == (2, 1, 1, 1)


def test_confusion_all_correct():
    tp, fp, fn, tn = eh.confusion([R, N, N], [R, N, N])
    assert fp == fn == 0


def test_confusion_errors():
    with pytest.raises(ValueError):
        eh.confusion([R, N], [R])
    with pytest.raises(ValueError):
        eh.confusion([], [])
    with pytest.raises(ValueError):
        eh.confusion([U], [R])


def test_all_negative_predictions_flag_precision():
    m = eh.evaluate([R, N, R], [N, N, N])
    assert (m.tp, m.fp) == (0, 0)
    assert m.precision == 0 and m.precision_undefined
    assert m.recall == 0 and m.f1 == 0


def test_metrics_two_thirds():
    m = eh.metrics(2, 1, 1, 0)
    assert m.precision == pytest.approx(2 / 3, abs=1e-12)
    assert m.recall == pytest.approx(2 / 3, abs=1e-12)
    assert m.f1 == pytest.approx(2 / 3, abs=1e-12)


def test_metrics_perfect():
    m = eh.metrics(3, 0, 0, 5)
    assert (m.precision, m.recall, m.f1) == (1, 1, 1)


def test_metrics_zero_recall():
    m = eh.metrics(0, 2, 3, 1)
    assert m.recall == 0 and m.f1 == 0


def test_metrics_rejects_empty():
    with pytest.raises(ValueError):
        eh.metrics(0, 0, 0, 0)


def oracle(y_true, y_pred):
    tp = sum(t is R and p is R for t, p in zip(y_true, y_pred))
    fp = sum(t is N and p is R for t, p in zip(y_true, y_pred))
    fn = sum(t is R and p is N for t, p in zip(y_true, y_pred))
    p = Fraction(tp, tp + fp) if tp + fp else Fraction(0)
    r = Fraction(tp, tp + fn) if tp + fn else Fraction(0)
    f = 2 * p * r / (p + r) if p + r else Fraction(0)
    return float(p), float(r), float(f)


def test_metrics_against_brute_force_oracle():
    rng = random.Random(0)
    for _ in range(1000):
        n = rng.randint(1, 20)
        t = [rng.choice((R, N)) for _ in range(n)]
        p = [rng.choice((R, N)) for _ in range(n)]
        m = eh.evaluate(t, p)
        assert (m.precision, m.recall, m.f1) == oracle(t, p)


def unit(p, r, f, s):
    return MetricSet(p, r, f, s, 0, 0, 0, s)


def test_weighted_aggregate_formula():
    agg = eh.weighted_aggregate([unit(1.0, 0.5, 0.6, 1), unit(0.5, 1.0, 0.9, 3)])
    assert agg.precision == pytest.approx((1.0 + 1.5) / 4)
    assert agg.recall == pytest.approx((0.5 + 3.0) / 4)
    assert agg.f1 == pytest.approx((0.6 + 2.7) / 4)
    assert agg.support == 4


@given(st.lists(st.tuples(st.integers(0, 9), st.integers(0, 9), st.integers(0, 9), st.integers(1, 9)),
                min_size=1, max_size=8), st.randoms())
def test_weighted_aggregate_permutation_invariant(counts, rnd):
    units = [eh.metrics(*c) for c in counts]
    shuffled = list(units)
    rnd.shuffle(shuffled)
    a, b = eh.weighted_aggregate(units), eh.weighted_aggregate(shuffled)
    assert (a.precision, a.recall, a.f1) == (b.precision, b.recall, b.f1)


@given(st.tuples(st.integers(0, 9), st.integers(0, 9), st.integers(0, 9), st.integers(1, 9)), st.integers(1, 6))
def test_identical_units_aggregate_exactly(c, n):
    m = eh.metrics(*c)
    agg = eh.weighted_aggregate([m] * n)
    assert (agg.precision, agg.recall, agg.f1) == (m.precision, m.recall, m.f1)


# -- leave one site out ----------------------------------------------------

def two_sites():
    return {"a": [example("x", "", R, "a"), example("y", "", N, "a")],
            "b": [example("x", "", R, "b"), example("y", "", N, "b"), example("z", "", N, "b")]}


def test_lomo_two_sites_two_rounds():
    seen = []

    def trainer(train, pool):
        seen.append({ex.source_site for ex in train})
        return lambda test: [ex.label for ex in test]

    rep = eh.leave_one_site_out(two_sites(), trainer)
    assert sorted(rep.per_unit) == ["a", "b"]
    assert seen == [{"b"}, {"a"}]


def test_lomo_constant_relevant_oracle():
    data = two_sites()
    rep = eh.leave_one_site_out(data, constant(R))
    assert rep.per_unit["a"].recall == 1.0 and rep.per_unit["a"].precision == pytest.approx(1 / 2)
    assert rep.per_unit["b"].recall == 1.0 and rep.per_unit["b"].precision == pytest.approx(1 / 3)


def test_lomo_table2_weights():
    data = {}
    for i, n in enumerate(MARKET_SIZES):
        pos = max(1, n // (i + 3))
        data[f"Market-{i + 1}"] = [example("t", "", R if j < pos else N, f"Market-{i + 1}") for j in range(n)]
    rep = eh.leave_one_site_out(data, constant(R))
    assert [rep.per_unit[f"Market-{i + 1}"].support for i in range(10)] == MARKET_SIZES
    expected = sum(Fraction(rep.per_unit[s].precision) * rep.per_unit[s].support for s in data) / sum(MARKET_SIZES)
    assert rep.weighted.precision == pytest.approx(float(expected), abs=1e-12)
    assert rep.weighted.support == sum(MARKET_SIZES)


def test_lomo_passes_only_training_site_pool():
    data = two_sites()
    data["a"].append(example("pool-a", "", U, "a"))
    data["b"].append(example("pool-b", "", U, "b"))
    pools = []

    def trainer(train, pool):
        pools.append([ex.title_text for ex in pool])
        return lambda test: [N] * len(test)

    rep = eh.leave_one_site_out(data, trainer)
    assert pools == [["pool-b"], ["pool-a"]]
    assert rep.per_unit["a"].support == 2  # unlabeled rows are never tested


def test_lomo_skips_single_class_round():
    data = {"a": [example("x", "", R, "a")], "b": [example("y", "", N, "b")], "c": [example("z", "", R, "c")]}
    rep = eh.leave_one_site_out(data, constant(R))
    assert rep.skipped == ["b"]
    assert sorted(rep.per_unit) == ["a", "c"]


def test_lomo_needs_two_sites():
    with pytest.raises(ProtocolError):
        eh.leave_one_site_out({"a": two_sites()["a"]}, constant(R))


def test_lomo_site_without_labels():
    data = two_sites()
    data["c"] = [example("q", "", U, "c")]
    with pytest.raises(ProtocolError):
        eh.leave_one_site_out(data, constant(R))


def test_lomo_feature_space_excludes_held_out_grams():
    from darkcti.trainers import Pipeline, SupervisedTrainer

    spaces = {}

    class Spy(SupervisedTrainer):
        def __call__(self, train, pool=()):
            fit = super().__call__(train, pool)
            spaces[frozenset(ex.source_site for ex in train)] = fit.space
            return fit

    data = {
        "a": [example("exploit kit", "qqzzxx", R, "a"), example("books", "qqzzxx", N, "a")] * 2,
        "b": [example("exploit rat", "common", R, "b"), example("books used", "common", N, "b")] * 2,
        "c": [example("exploit kit", "common", R, "c"), example("books old", "common", N, "c")] * 2,
    }
    eh.leave_one_site_out(data, Spy(pipeline=Pipeline(min_df=1)))
    held_out_a = spaces[frozenset({"b", "c"})]
    assert not any("qqz" in g for g in held_out_a.body_vocab)
    assert any("qqz" in g for g in spaces[frozenset({"a", "c"})].body_vocab)


# -- k-fold ----------------------------------------------------------------

def labeled_set(n_pos, n_neg):
    return [example(f"p{i}", "", R) for i in range(n_pos)] + [example(f"n{i}", "", N) for i in range(n_neg)]


def test_kfold_leave_one_out():
    data = labeled_set(3, 3)
    rep = eh.kfold(data, 6, lambda tr, pool: (lambda te: [ex.label for ex in te]), seed=0)
    assert len(rep.per_unit) == 6
    assert all(m.support == 1 for m in rep.per_unit.values())


@given(st.integers(3, 30), st.integers(3, 30), st.integers(2, 6), st.integers(0, 1000))
def test_stratified_folds_partition(n_pos, n_neg, k, seed):
    labels = [R] * n_pos + [N] * n_neg
    folds = eh.stratified_folds(labels, k, seed)
    flat = np.concatenate(folds)
    assert sorted(flat.tolist()) == list(range(len(labels)))
    sizes = [f.size for f in folds]
    assert max(sizes) - min(sizes) <= 1
    again = eh.stratified_folds(labels, k, seed)
    assert all(np.array_equal(a, b) for a, b in zip(folds, again))


def test_kfold_each_example_tested_once():
    tested = []

    def trainer(train, pool):
        def predict(test):
            tested.extend(ex.title_text for ex in test)
            return [N] * len(test)
        return predict

    data = labeled_set(7, 13)
    eh.kfold(data, 4, trainer, seed=3)
    assert sorted(tested) == sorted(ex.title_text for ex in data)


def test_kfold_pool_reaches_trainer():
    pools = []
    data = labeled_set(4, 4) + [example("u1"), example("u2")]
    eh.kfold(data, 2, lambda tr, pool: pools.append(len(pool)) or (lambda te: [N] * len(te)), seed=0,
             unlabeled=[example("u3")])
    assert pools == [3, 3]


def test_kfold_missing_class_error():
    with pytest.raises(ProtocolError):
        eh.kfold(labeled_set(1, 5), 2, constant(R), seed=0)


def test_kfold_bad_k():
    with pytest.raises(ProtocolError):
        eh.kfold(labeled_set(3, 3), 1, constant(R), seed=0)
    with pytest.raises(ProtocolError):
        eh.kfold(labeled_set(1, 1), 3, constant(R), seed=0)


# -- reports ---------------------------------------------------------------

def test_emit_single_unit_report(tmp_path):
    rep = eh.CvReport({"a": eh.metrics(1, 1, 0, 2)}, "KFOLD(2)", "X")
    nd, txt = eh.emit_report(rep, tmp_path / "r.ndjson")
    lines = nd.read_text().splitlines()
    assert len(lines) == 2
    assert json.loads(lines[0]) == {"unit": "a", "precision": 0.5, "recall": 1.0, "f1": 2 / 3, "support": 4,
                                    "tp": 1, "fp": 1, "fn": 0, "tn": 2}
    assert json.loads(lines[1])["aggregate"] is True
    assert "weighted" in txt.read_text()


def test_report_round_trip_recomputes_aggregate(tmp_path):
    rep = eh.leave_one_site_out({"a": labeled_set(3, 5), "b": labeled_set(2, 9), "c": labeled_set(4, 1)}, constant(R))
    path, _ = eh.emit_report(rep, tmp_path / "r.ndjson")
    back, stored = eh.load_report(path)
    for key in ("precision", "recall", "f1"):
        assert getattr(back.weighted, key) == pytest.approx(stored[key], abs=1e-9)
        assert getattr(back.weighted, key) == pytest.approx(getattr(rep.weighted, key), abs=1e-9)


def test_empty_report_rejected():
    with pytest.raises(ProtocolError):
        eh.CvReport({}, "KFOLD(2)")


def test_format_table_lists_methods():
    rep = eh.CvReport({"a": eh.metrics(1, 0, 0, 1)}, "KFOLD(2)")
    text = eh.format_table({"SVM": rep, "NB": rep})
    assert text.splitlines()[2].startswith("SVM") and text.splitlines()[3].startswith("NB")
