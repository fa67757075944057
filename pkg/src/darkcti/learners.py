"""Supervised binary classifiers over sparse n-gram vectors.

All four kinds share one contract: ``train`` returns an immutable Model, every
model produces a confidence for RELEVANT in [0, 1], and ``predict`` returns
RELEVANT iff that confidence is strictly above 0.5. Exact ties therefore go to
NOT_RELEVANT.

Linear models (logistic regression, linear SVM) are fit by mini-batch
stochastic subgradient descent with a seeded shuffle and per-epoch iterate
averaging. An epoch's averaged weights are accepted only if they do not raise
the full training objective; otherwise the step size is halved and the epoch
is rerun. The recorded objective is therefore non-increasing.
"""

from __future__ import annotations

import enum
import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.special import expit, log_expit

from darkcti.datamodel import Label, parse_label
from darkcti.textpipe import SparseVector, as_csr

MODEL_FORMAT_VERSION = 1


class ModelKind(str, enum.Enum):
    NAIVE_BAYES = "NAIVE_BAYES"
    LOGISTIC_REGRESSION = "LOGISTIC_REGRESSION"
    LINEAR_SVM = "LINEAR_SVM"
    RANDOM_FOREST = "RANDOM_FOREST"


class TrainingError(ValueError):
    pass


class DimensionError(ValueError):
    pass


class ModelFormatError(ValueError):
    pass


_LINEAR = {
    "max_epochs": 50,
    "learning_rate": 8.0,
    "batch_size": 8,
    "tol": 1e-7,
    "positive_weight": 1.0,
}

DEFAULT_HYPERPARAMS = {
    ModelKind.NAIVE_BAYES: {"alpha": 1.0},
    ModelKind.LOGISTIC_REGRESSION: {"l2_lambda": 1e-5, **_LINEAR},
    ModelKind.LINEAR_SVM: {"C": 10.0, **_LINEAR},
    ModelKind.RANDOM_FOREST: {
        "n_trees": 50,
        "max_depth": None,
        "features_per_split": "sqrt",
        "min_leaf": 1,
        "min_df": 1,
        "rng_seed": 0,
    },
}


def _positive(name, v, strict=True, integer=False):
    ok = isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)
    if integer:
        ok = ok and float(v).is_integer()
    if not ok or (v <= 0 if strict else v < 0):
        raise ValueError(f"hyperparameter {name} must be {'> 0' if strict else '>= 0'}"
                         f"{' integer' if integer else ''}, got {v!r}")


def resolve_hyperparams(kind, hp: Mapping | None = None) -> dict:
    """Defaults merged with ``hp``; unknown names and out-of-range values raise."""
    kind = ModelKind(kind)
    out = dict(DEFAULT_HYPERPARAMS[kind])
    hp = dict(hp or {})
    unknown = set(hp) - set(out)
    if unknown:
        raise ValueError(f"unknown hyperparameters for {kind.value}: {sorted(unknown)}")
    out.update(hp)
    if kind is ModelKind.NAIVE_BAYES:
        _positive("alpha", out["alpha"])
    elif kind is ModelKind.RANDOM_FOREST:
        _positive("n_trees", out["n_trees"], integer=True)
        if out["max_depth"] is not None:
            _positive("max_depth", out["max_depth"], integer=True)
        fps = out["features_per_split"]
        if fps not in ("sqrt", "all"):
            _positive("features_per_split", fps, integer=True)
        _positive("min_leaf", out["min_leaf"], integer=True)
        _positive("min_df", out["min_df"], integer=True)
        if not isinstance(out["rng_seed"], int):
            raise ValueError("hyperparameter rng_seed must be an integer")
    else:
        if kind is ModelKind.LOGISTIC_REGRESSION:
            _positive("l2_lambda", out["l2_lambda"], strict=False)
        else:
            _positive("C", out["C"])
        _positive("max_epochs", out["max_epochs"], integer=True)
        _positive("learning_rate", out["learning_rate"])
        _positive("batch_size", out["batch_size"], integer=True)
        _positive("tol", out["tol"], strict=False)
        _positive("positive_weight", out["positive_weight"])
    return out


@dataclass(frozen=True, eq=False)
class Model:
    kind: ModelKind
    parameters: dict
    feature_dimension: int
    training_meta: dict = field(default_factory=dict)


# -- label helpers ---------------------------------------------------------

def _signs(y: Sequence) -> np.ndarray:
    out = np.empty(len(y), dtype=np.float64)
    for i, v in enumerate(y):
        lab = parse_label(v)
        if lab is Label.UNLABELED:
            raise TrainingError("training labels must be RELEVANT or NOT_RELEVANT")
        out[i] = 1.0 if lab is Label.RELEVANT else -1.0
    return out


def _rows(x) -> sp.csr_matrix:
    if isinstance(x, SparseVector):
        return as_csr([x])
    return as_csr(x)


def _check_dim(model: Model, X: sp.csr_matrix):
    if X.shape[1] != model.feature_dimension:
        raise DimensionError(f"vector dimension {X.shape[1]} does not match model dimension {model.feature_dimension}")


# -- naive Bayes -----------------------------------------------------------

def _train_nb(X, s, hp):
    alpha = hp["alpha"]
    d = X.shape[1]
    log_prior, flp = [], []
    for cls in (-1.0, 1.0):
        rows = X[np.flatnonzero(s == cls)]
        counts = np.asarray(rows.sum(axis=0)).ravel()
        log_prior.append(math.log(rows.shape[0] / X.shape[0]))
        flp.append(np.log(counts + alpha) - math.log(counts.sum() + alpha * d))
    return {"log_prior": np.array(log_prior), "feature_log_prob": np.vstack(flp)}


def _nb_scores(params, X):
    joint = X @ params["feature_log_prob"].T + params["log_prior"]
    return np.asarray(joint[:, 1] - joint[:, 0]).ravel()


# -- linear models ---------------------------------------------------------

def logistic_objective(w, b, X, s, l2_lambda, sample_weight=None):
    """L2-regularized mean logistic loss and its gradient (bias unregularized)."""
    z = np.asarray(X @ w).ravel() + b
    c = np.ones_like(s) if sample_weight is None else sample_weight
    n = X.shape[0]
    loss = -np.dot(c, log_expit(s * z)) / n + 0.5 * l2_lambda * np.dot(w, w)
    g = -c * s * expit(-s * z) / n
    grad_w = np.asarray(X.T @ g).ravel() + l2_lambda * w
    return float(loss), grad_w, float(g.sum())


def hinge_objective(w, b, X, s, l2_lambda, sample_weight=None):
    """L2-regularized mean hinge loss and a subgradient."""
    z = np.asarray(X @ w).ravel() + b
    c = np.ones_like(s) if sample_weight is None else sample_weight
    n = X.shape[0]
    margin = 1.0 - s * z
    loss = np.dot(c, np.maximum(margin, 0.0)) / n + 0.5 * l2_lambda * np.dot(w, w)
    g = np.where(margin > 0, -c * s, 0.0) / n
    grad_w = np.asarray(X.T @ g).ravel() + l2_lambda * w
    return float(loss), grad_w, float(g.sum())


def _batch_grad(loss_name, z, s, c):
    if loss_name == "logistic":
        return -c * s * expit(-s * z)
    return np.where(1.0 - s * z > 0, -c * s, 0.0)


def _train_linear(X, s, hp, seed, objective, l2_lambda, loss_name):
    n, d = X.shape
    c = np.where(s > 0, hp["positive_weight"], 1.0)
    rng = np.random.default_rng(seed)
    batch = int(hp["batch_size"])
    eta0 = float(hp["learning_rate"])
    w, b = np.zeros(d), 0.0
    loss = objective(w, b, X, s, l2_lambda, c)[0]
    history = [loss]
    t = 0
    for _ in range(int(hp["max_epochs"])):
        perm = rng.permutation(n)
        Xp, sp_, cp = X[perm], s[perm], c[perm]
        indptr, indices, data = Xp.indptr, Xp.indices, Xp.data
        row_of = np.repeat(np.arange(n), np.diff(indptr))
        accepted = False
        for _retry in range(30):
            wk, bk, tk = w.copy(), b, t
            w_sum, b_sum, steps = np.zeros(d), 0.0, 0
            for start in range(0, n, batch):
                end = min(start + batch, n)
                lo, hi = indptr[start], indptr[end]
                cols, vals = indices[lo:hi], data[lo:hi]
                rows = row_of[lo:hi] - start
                z = np.bincount(rows, weights=vals * wk[cols], minlength=end - start) + bk
                g = _batch_grad(loss_name, z, sp_[start:end], cp[start:end]) / (end - start)
                eta = eta0 / (1.0 + eta0 * l2_lambda * tk)
                if l2_lambda:
                    wk *= 1.0 - eta * l2_lambda
                np.subtract.at(wk, cols, eta * vals * g[rows])
                bk -= eta * float(g.sum())
                tk += 1
                w_sum += wk
                b_sum += bk
                steps += 1
            w_avg, b_avg = w_sum / steps, b_sum / steps
            new_loss = objective(w_avg, b_avg, X, s, l2_lambda, c)[0]
            if new_loss <= loss:
                accepted = True
                break
            eta0 /= 2.0
        if not accepted:
            break
        improvement = loss - new_loss
        w, b, t, loss = w_avg, b_avg, tk, new_loss
        history.append(loss)
        if improvement <= hp["tol"] * max(1.0, abs(loss)):
            break
    return {"w": w, "b": float(b)}, history


def _linear_scores(params, X):
    return np.asarray(X @ params["w"]).ravel() + params["b"]


# -- random forest ---------------------------------------------------------

@dataclass
class _Tree:
    feature: list
    threshold: list
    left: list
    right: list
    value: list  # fraction of RELEVANT training samples at the node

    def to_dict(self):
        return {"feature": self.feature, "threshold": self.threshold, "left": self.left,
                "right": self.right, "value": self.value}


def _best_split(cols: np.ndarray, pos: np.ndarray, min_leaf: int):
    """Gini search over every column of a dense node block.

    Returns (column, threshold, child impurity) or None. Ties go to the lowest
    column, then the lowest threshold.
    """
    n = cols.shape[0]
    order = np.argsort(cols, axis=0, kind="stable")
    v = np.take_along_axis(cols, order, axis=0)
    cum_pos = np.cumsum(pos[order], axis=0)
    left_n = np.arange(1, n, dtype=np.float64)[:, None]
    right_n = n - left_n
    valid = (v[1:] > v[:-1]) & (left_n >= min_leaf) & (right_n >= min_leaf)
    if not valid.any():
        return None
    left_pos = cum_pos[:-1]
    right_pos = cum_pos[-1] - left_pos
    lp, rp = left_pos / left_n, right_pos / right_n
    impurity = (left_n * 2 * lp * (1 - lp) + right_n * 2 * rp * (1 - rp)) / n
    impurity = np.where(valid, impurity, np.inf)
    flat = int(np.argmin(impurity.T))
    j, k = divmod(flat, n - 1)
    return j, float((v[k, j] + v[k + 1, j]) / 2.0), float(impurity[k, j])


def _entries(X: sp.csr_matrix):
    """Per-entry (row, feature, value) arrays of a CSR matrix."""
    X = X.tocsr()
    rows = np.repeat(np.arange(X.shape[0]), np.diff(X.indptr))
    return rows, X.indices.astype(np.int64), X.data


def _grow_tree(X: sp.csr_matrix, pos: np.ndarray, pool: np.ndarray, hp, rng) -> _Tree:
    tree = _Tree([], [], [], [], [])
    max_depth = hp["max_depth"]
    min_leaf = int(hp["min_leaf"])
    fps = hp["features_per_split"]
    n_pool = pool.size
    m = n_pool if fps == "all" else max(1, int(round(math.sqrt(n_pool)))) if fps == "sqrt" else int(fps)
    in_pool = np.zeros(X.shape[1], dtype=bool)
    in_pool[pool] = True

    e_row, e_feat, e_val = _entries(X)
    keep = in_pool[e_feat]
    e_row, e_feat, e_val = e_row[keep], e_feat[keep], e_val[keep]
    slot = np.full(X.shape[1], -1, dtype=np.int64)  # feature -> column in the node block
    where = np.zeros(X.shape[0], dtype=np.int64)    # row -> position within the node
    side = np.zeros(X.shape[0], dtype=bool)

    def new_node(idx):
        tree.feature.append(-1)
        tree.threshold.append(0.0)
        tree.left.append(-1)
        tree.right.append(-1)
        tree.value.append(float(pos[idx].mean()))
        return len(tree.feature) - 1

    all_rows = np.arange(X.shape[0])
    stack = [(new_node(all_rows), all_rows, np.arange(e_row.size), 0)]
    while stack:
        node, idx, ent, depth = stack.pop()
        frac = tree.value[node]
        if frac in (0.0, 1.0) or (max_depth is not None and depth >= max_depth) or idx.size < 2 * min_leaf:
            continue
        present = np.unique(e_feat[ent])
        if present.size == 0:
            continue
        cand = present if present.size <= m else np.sort(rng.choice(present, size=m, replace=False))
        slot[cand] = np.arange(cand.size)
        where[idx] = np.arange(idx.size)
        sel = ent[slot[e_feat[ent]] >= 0]
        block = np.zeros((idx.size, cand.size))
        block[where[e_row[sel]], slot[e_feat[sel]]] = e_val[sel]
        slot[cand] = -1
        best = _best_split(block, pos[idx], min_leaf)
        if best is None:
            continue
        j, thr, _ = best
        go_left = block[:, j] <= thr
        side[idx] = go_left
        li, ri = idx[go_left], idx[~go_left]
        ent_left = side[e_row[ent]]
        tree.feature[node] = int(cand[j])
        tree.threshold[node] = thr
        tree.left[node] = new_node(li)
        tree.right[node] = new_node(ri)
        stack.append((tree.right[node], ri, ent[~ent_left], depth + 1))
        stack.append((tree.left[node], li, ent[ent_left], depth + 1))
    return tree


def _tree_votes(tree: dict, entries, n: int) -> np.ndarray:
    """1.0 where the tree's leaf majority is RELEVANT (ties vote NOT_RELEVANT)."""
    e_row, e_feat, e_val = entries
    out = np.zeros(n)
    value_of = np.zeros(n)
    side = np.zeros(n, dtype=bool)
    feat, thr, left, right, value = tree["feature"], tree["threshold"], tree["left"], tree["right"], tree["value"]
    stack = [(0, np.arange(n), np.arange(e_row.size))]
    while stack:
        node, idx, ent = stack.pop()
        if idx.size == 0:
            continue
        f = feat[node]
        if f < 0:
            out[idx] = 1.0 if value[node] > 0.5 else 0.0
            continue
        value_of[idx] = 0.0
        hit = ent[e_feat[ent] == f]
        value_of[e_row[hit]] = e_val[hit]
        go_left = value_of[idx] <= thr[node]
        side[idx] = go_left
        ent_left = side[e_row[ent]]
        stack.append((left[node], idx[go_left], ent[ent_left]))
        stack.append((right[node], idx[~go_left], ent[~ent_left]))
    return out


def _train_rf(X, s, hp, seed):
    pos = (s > 0).astype(np.float64)
    df = np.diff(X.tocsc().indptr)
    pool = np.flatnonzero(df >= hp["min_df"])
    rng = np.random.default_rng([seed, hp["rng_seed"]])
    n = X.shape[0]
    trees = []
    for _ in range(int(hp["n_trees"])):
        if hp["n_trees"] > 1:
            boot = np.sort(rng.integers(0, n, size=n))
            # keep both classes in every bag
            while pos[boot].min() == pos[boot].max():
                boot = np.sort(rng.integers(0, n, size=n))
        else:
            boot = np.arange(n)
        trees.append(_grow_tree(X[boot], pos[boot], pool, hp, rng).to_dict())
    return {"trees": trees}


def _rf_fraction(params, X):
    entries = _entries(X)
    votes = np.zeros(X.shape[0])
    for tree in params["trees"]:
        votes += _tree_votes(tree, entries, X.shape[0])
    return votes / len(params["trees"])


# -- public API ------------------------------------------------------------

def train(kind, X, y: Sequence, hp: Mapping | None = None, seed: int = 0) -> Model:
    kind = ModelKind(kind)
    hp = resolve_hyperparams(kind, hp)
    X = as_csr(X)
    s = _signs(y)
    if X.shape[0] != s.size:
        raise DimensionError(f"{X.shape[0]} vectors but {s.size} labels")
    if s.size < 2:
        raise TrainingError("need at least 2 training examples")
    if np.all(s == s[0]):
        raise TrainingError("training labels contain a single class")
    meta = {"n_labeled": int(s.size), "class_prior": float((s > 0).mean()), "hyperparams": hp, "seed": seed}
    if kind is ModelKind.NAIVE_BAYES:
        params = _train_nb(X, s, hp)
    elif kind is ModelKind.LOGISTIC_REGRESSION:
        params, history = _train_linear(X, s, hp, seed, logistic_objective, hp["l2_lambda"], "logistic")
        meta["loss_history"] = history
    elif kind is ModelKind.LINEAR_SVM:
        params, history = _train_linear(X, s, hp, seed, hinge_objective, 1.0 / (hp["C"] * s.size), "hinge")
        meta["loss_history"] = history
    else:
        params = _train_rf(X, s, hp, seed)
    return Model(kind, params, X.shape[1], meta)


def decision_scores(model: Model, X) -> np.ndarray:
    """Real-valued scores; larger means more RELEVANT. Zero is the decision boundary."""
    X = _rows(X)
    _check_dim(model, X)
    if model.kind is ModelKind.NAIVE_BAYES:
        return _nb_scores(model.parameters, X)
    if model.kind is ModelKind.RANDOM_FOREST:
        return _rf_fraction(model.parameters, X) - 0.5
    return _linear_scores(model.parameters, X)


def confidences(model: Model, X) -> np.ndarray:
    """P(RELEVANT)-like score per row, monotone in the decision score."""
    X = _rows(X)
    _check_dim(model, X)
    if model.kind is ModelKind.RANDOM_FOREST:
        return _rf_fraction(model.parameters, X)
    return expit(decision_scores(model, X))


def predict_many(model: Model, X) -> list[Label]:
    return [Label.RELEVANT if c > 0.5 else Label.NOT_RELEVANT for c in confidences(model, X)]


def predict(model: Model, x) -> Label:
    return predict_many(model, x)[0]


def predict_confidence(model: Model, x) -> float:
    return float(confidences(model, x)[0])


# -- grid search -----------------------------------------------------------

def _sort_key(point: Mapping) -> tuple:
    def rank(v):
        if v is None:
            return (0, 0, "")
        if isinstance(v, (int, float)) and not isinstance(v, bool):
            return (1, v, "")
        return (2, 0, str(v))
    return tuple((k, rank(point[k])) for k in sorted(point))


def grid_search(kind, grid: Mapping[str, Sequence], X, y: Sequence, folds: int = 5, seed: int = 0):
    """Stratified k-fold F1 for every grid point.

    Returns ``(best_hyperparams, table)``; ``table`` has one dict per grid point
    with the point's values plus weighted precision, recall and f1. Equal F1
    scores resolve to the lexicographically smallest parameter assignment.
    """
    from darkcti.evalharness import ProtocolError, evaluate, stratified_folds, weighted_aggregate

    if not grid or any(len(v) == 0 for v in grid.values()):
        raise ValueError("grid must name at least one candidate per parameter")
    X = as_csr(X)
    labels = [parse_label(v) for v in y]
    fold_idx = stratified_folds(labels, folds, seed)
    s = _signs(labels)
    for f, test in enumerate(fold_idx):
        train_mask = np.ones(len(labels), dtype=bool)
        train_mask[test] = False
        if np.unique(s[train_mask]).size < 2:
            raise ProtocolError(f"fold {f} leaves a single class for training")
    names = sorted(grid)
    table = []
    for combo in itertools.product(*(grid[n] for n in names)):
        point = dict(zip(names, combo))
        resolve_hyperparams(kind, point)
        units = []
        for test in fold_idx:
            train_mask = np.ones(len(labels), dtype=bool)
            train_mask[test] = False
            train_rows = np.flatnonzero(train_mask)
            model = train(kind, X[train_rows], [labels[i] for i in train_rows], point, seed)
            units.append(evaluate([labels[i] for i in test], predict_many(model, X[test])))
        agg = weighted_aggregate(units)
        table.append({**point, "precision": agg.precision, "recall": agg.recall, "f1": agg.f1})
    best = min(table, key=lambda row: (-row["f1"], _sort_key({n: row[n] for n in names})))
    return resolve_hyperparams(kind, {n: best[n] for n in names}), table


# -- persistence -----------------------------------------------------------

def _to_json(value):
    if isinstance(value, np.ndarray):
        return {"__ndarray__": value.tolist(), "dtype": str(value.dtype), "shape": list(value.shape)}
    if isinstance(value, dict):
        return {k: _to_json(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_to_json(v) for v in value]
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    return value


def _from_json(value):
    if isinstance(value, dict):
        if "__ndarray__" in value:
            return np.array(value["__ndarray__"], dtype=value["dtype"]).reshape(value["shape"])
        return {k: _from_json(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_from_json(v) for v in value]
    return value


def model_to_dict(model: Model) -> dict:
    return {
        "format": "darkcti.model",
        "version": MODEL_FORMAT_VERSION,
        "kind": model.kind.value,
        "feature_dimension": model.feature_dimension,
        "parameters": _to_json(model.parameters),
        "training_meta": _to_json(model.training_meta),
    }


def model_from_dict(data: dict) -> Model:
    if data.get("format") != "darkcti.model":
        raise ModelFormatError("not a model file")
    if data.get("version") != MODEL_FORMAT_VERSION:
        raise ModelFormatError(f"model file version {data.get('version')!r}, expected {MODEL_FORMAT_VERSION}")
    return Model(ModelKind(data["kind"]), _from_json(data["parameters"]), int(data["feature_dimension"]),
                 _from_json(data["training_meta"]))


def save_model(model: Model, path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model)), encoding="utf-8")


def load_model(path) -> Model:
    return model_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
