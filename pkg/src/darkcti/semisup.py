"""Semi-supervised learners: label propagation over a similarity graph and two-view co-training."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import spsolve

from darkcti import learners
from darkcti.datamodel import Label, LabeledExample, parse_label
from darkcti.textpipe import VIEW_A, VIEW_B, ViewSplit, as_csr

log = logging.getLogger(__name__)

GAUSSIAN_CUTOFF = 1e-8
_BLOCK = 512


@dataclass(frozen=True)
class KnnKernel:
    k: int = 10


@dataclass(frozen=True)
class GaussianKernel:
    sigma: float = 1.0


def kernel_from_config(cfg) -> KnnKernel | GaussianKernel:
    """``{"type": "KNN", "k": 10}`` or ``{"type": "GAUSSIAN", "sigma": 0.5}``."""
    if isinstance(cfg, (KnnKernel, GaussianKernel)):
        return cfg
    cfg = dict(cfg or {})
    kind = str(cfg.pop("type", "KNN")).upper()
    if kind == "KNN":
        return KnnKernel(**cfg)
    if kind == "GAUSSIAN":
        return GaussianKernel(**cfg)
    raise ValueError(f"unknown kernel type {kind!r}")


@dataclass(frozen=True, eq=False)
class SimilarityGraph:
    W: sp.csr_matrix
    labeled_count: int
    kernel: KnnKernel | GaussianKernel

    @property
    def n(self) -> int:
        return self.W.shape[0]


def _unit_rows(X: sp.csr_matrix) -> sp.csr_matrix:
    norms = np.sqrt(np.asarray(X.multiply(X).sum(axis=1)).ravel())
    scale = np.divide(1.0, norms, out=np.zeros_like(norms), where=norms > 0)
    return sp.csr_matrix(sp.diags(scale) @ X)


def _knn_sets(Xn: sp.csr_matrix, k: int, exclude_self: bool):
    """Row i -> indices whose cosine similarity is >= the k-th largest (ties all kept)."""
    n = Xn.shape[0]
    rows, cols = [], []
    for start in range(0, n, _BLOCK):
        S = np.asarray((Xn[start:start + _BLOCK] @ Xn.T).todense())
        if exclude_self:
            S[np.arange(S.shape[0]), np.arange(start, start + S.shape[0])] = -np.inf
        kth = -np.partition(-S, k - 1, axis=1)[:, k - 1]
        r, c = np.nonzero(S >= kth[:, None])
        rows.append(r + start)
        cols.append(c)
    return np.concatenate(rows), np.concatenate(cols)


def build_similarity_graph(X_all, kernel=KnnKernel(), labeled_count: int = 0) -> SimilarityGraph:
    """Symmetric weighted graph over the rows of ``X_all`` (labeled rows first)."""
    X = as_csr(X_all)
    n = X.shape[0]
    if n < 2:
        raise ValueError("need at least 2 vertices")
    kernel = kernel_from_config(kernel)
    Xn = _unit_rows(X)
    if isinstance(kernel, KnnKernel):
        if not 1 <= kernel.k < n:
            raise ValueError(f"k must be in [1, {n - 1}], got {kernel.k}")
        r, c = _knn_sets(Xn, kernel.k, exclude_self=True)
        A = sp.csr_matrix((np.ones(r.size), (r, c)), shape=(n, n))
        A = ((A + A.T) > 0).astype(np.float64)
    else:
        if not kernel.sigma > 0:
            raise ValueError(f"sigma must be positive, got {kernel.sigma}")
        sq = np.asarray(Xn.multiply(Xn).sum(axis=1)).ravel()
        rows, cols, vals = [], [], []
        for start in range(0, n, _BLOCK):
            G = np.asarray((Xn[start:start + _BLOCK] @ Xn.T).todense())
            d2 = np.maximum(sq[start:start + G.shape[0], None] + sq[None, :] - 2.0 * G, 0.0)
            Wb = np.exp(-d2 / (2.0 * kernel.sigma ** 2))
            r, c = np.nonzero(Wb >= GAUSSIAN_CUTOFF)
            rows.append(r + start)
            cols.append(c)
            vals.append(Wb[r, c])
        A = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))
    # mirror the strict upper triangle so W == W.T bit for bit
    upper = sp.triu(A, k=1).tocsr()
    W = (upper + upper.T).tocsr()
    W.sort_indices()
    return SimilarityGraph(W, labeled_count, kernel)


# -- label propagation -----------------------------------------------------

@dataclass
class PropagationResult:
    labels: list[Label]            # one per unlabeled vertex
    scores: np.ndarray             # f over all vertices, in [0, 1]
    prior_labeled: list[int]       # unlabeled vertices with no path to a labeled one
    iterations: int
    converged: bool


def _clamp_values(graph: SimilarityGraph, y_labeled: Sequence) -> np.ndarray:
    y = [parse_label(v) for v in y_labeled]
    if len(y) != graph.labeled_count:
        raise ValueError(f"{len(y)} labels for {graph.labeled_count} labeled vertices")
    if Label.UNLABELED in y:
        raise ValueError("labeled vertices need RELEVANT or NOT_RELEVANT")
    if Label.RELEVANT not in y or Label.NOT_RELEVANT not in y:
        raise ValueError("label propagation needs at least one labeled vertex per class")
    return np.array([1.0 if v is Label.RELEVANT else 0.0 for v in y])


def _unreachable(graph: SimilarityGraph) -> np.ndarray:
    """Unlabeled vertices whose component holds no labeled vertex (isolated ones included)."""
    _, comp = connected_components(graph.W, directed=False)
    anchored = np.zeros(comp.max() + 1, dtype=bool)
    anchored[comp[:graph.labeled_count]] = True
    out = ~anchored[comp]
    out[:graph.labeled_count] = False
    return out


def label_propagation(graph: SimilarityGraph, y_labeled: Sequence, tol: float = 1e-6,
                      max_iter: int = 100_000) -> PropagationResult:
    """Iterate f <- D^-1 W f with labeled vertices clamped, from 0.5 on unlabeled ones.

    Stops once the largest per-step change is below ``tol`` and the geometric
    extrapolation of the remaining error is below ``tol`` as well, so slowly
    mixing graphs do not stop early. Unlabeled vertices cut off from every
    labeled vertex take the labeled class prior and are listed in ``prior_labeled``.
    """
    l, n = graph.labeled_count, graph.n
    fl = _clamp_values(graph, y_labeled)
    prior = float(fl.mean())
    W = graph.W
    deg = np.asarray(W.sum(axis=1)).ravel()
    orphan = _unreachable(graph)
    live = np.zeros(n, dtype=bool)
    live[l:] = ~orphan[l:]
    inv_deg = np.divide(1.0, deg, out=np.zeros_like(deg), where=deg > 0)

    f = np.full(n, 0.5)
    f[:l] = fl
    f[orphan] = prior
    prev_change = None
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        g = inv_deg * (W @ f)
        change = float(np.max(np.abs(g[live] - f[live]))) if live.any() else 0.0
        f[live] = g[live]
        if change < tol:
            ratio = change / prev_change if prev_change else 0.0
            if ratio < 1.0 and change * ratio / (1.0 - ratio) < tol:
                converged = True
                break
        prev_change = change
    np.clip(f, 0.0, 1.0, out=f)
    if orphan.any():
        log.warning("%d unlabeled vertices have no path to a labeled vertex; using class prior %.3f",
                    int(orphan.sum()), prior)
    labels = [Label.RELEVANT if v > 0.5 else Label.NOT_RELEVANT for v in f[l:]]
    return PropagationResult(labels, f, (np.flatnonzero(orphan)).tolist(), it, converged)


def harmonic_solution(graph: SimilarityGraph, y_labeled: Sequence) -> np.ndarray:
    """Closed form f_u = (D_uu - W_uu)^-1 W_ul f_l on components that hold a labeled vertex."""
    l, n = graph.labeled_count, graph.n
    fl = _clamp_values(graph, y_labeled)
    orphan = _unreachable(graph)
    f = np.empty(n)
    f[:l] = fl
    f[orphan] = fl.mean()
    u = np.flatnonzero(~orphan & (np.arange(n) >= l))
    if u.size:
        W = graph.W.tocsr()
        deg = np.asarray(W.sum(axis=1)).ravel()
        Wuu = W[u][:, u]
        Lap = (sp.diags(deg[u]) - Wuu).tocsc()
        rhs = np.asarray(W[u][:, :l] @ fl).ravel()
        f[u] = np.atleast_1d(spsolve(Lap, rhs))
    return f


@dataclass(frozen=True, eq=False)
class PropagationModel:
    """Scored training graph plus the out-of-sample rule for new points."""
    X_train: sp.csr_matrix
    scores: np.ndarray
    kernel: KnnKernel | GaussianKernel
    k: int
    prior: float

    def confidences(self, X) -> np.ndarray:
        """Kernel-weighted mean of the scores of the k nearest training points."""
        Xq = _unit_rows(as_csr(X))
        Xt = _unit_rows(self.X_train)
        k = min(self.k, Xt.shape[0])
        out = np.empty(Xq.shape[0])
        for start in range(0, Xq.shape[0], _BLOCK):
            S = np.asarray((Xq[start:start + _BLOCK] @ Xt.T).todense())
            nn = np.argpartition(-S, k - 1, axis=1)[:, :k]
            sims = np.take_along_axis(S, nn, axis=1)
            if isinstance(self.kernel, GaussianKernel):
                wts = np.exp(-np.maximum(2.0 - 2.0 * sims, 0.0) / (2.0 * self.kernel.sigma ** 2))
            else:
                wts = (sims > 0).astype(np.float64)
            num = (wts * self.scores[nn]).sum(axis=1)
            den = wts.sum(axis=1)
            out[start:start + S.shape[0]] = np.where(den > 0, num / np.where(den > 0, den, 1.0), self.prior)
        return out

    def predict_many(self, X) -> list[Label]:
        return [Label.RELEVANT if c > 0.5 else Label.NOT_RELEVANT for c in self.confidences(X)]


PROPAGATION_FORMAT_VERSION = 1


def save_propagation_model(model: PropagationModel, path) -> None:
    X = as_csr(model.X_train)
    kernel = ({"type": "KNN", "k": model.kernel.k} if isinstance(model.kernel, KnnKernel)
              else {"type": "GAUSSIAN", "sigma": model.kernel.sigma})
    data = {
        "format": "darkcti.propagation_model", "version": PROPAGATION_FORMAT_VERSION,
        "shape": list(X.shape), "data": X.data.tolist(), "indices": X.indices.tolist(), "indptr": X.indptr.tolist(),
        "scores": model.scores.tolist(), "kernel": kernel, "k": model.k, "prior": model.prior,
    }
    Path(path).write_text(json.dumps(data), encoding="utf-8")


def load_propagation_model(path) -> PropagationModel:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if data.get("format") != "darkcti.propagation_model" or data.get("version") != PROPAGATION_FORMAT_VERSION:
        raise learners.ModelFormatError(f"{path}: not a version {PROPAGATION_FORMAT_VERSION} propagation model")
    X = sp.csr_matrix((np.array(data["data"], dtype=np.float64), np.array(data["indices"], dtype=np.int32),
                       np.array(data["indptr"], dtype=np.int32)), shape=tuple(data["shape"]))
    return PropagationModel(X, np.array(data["scores"], dtype=np.float64), kernel_from_config(data["kernel"]),
                            int(data["k"]), float(data["prior"]))


def fit_propagation(X_labeled, y_labeled: Sequence, X_unlabeled=None, kernel=KnnKernel(),
                    tol: float = 1e-6, max_iter: int = 100_000) -> tuple[PropagationModel, PropagationResult]:
    XL = as_csr(X_labeled)
    parts = [XL] if X_unlabeled is None or X_unlabeled.shape[0] == 0 else [XL, as_csr(X_unlabeled)]
    X_all = sp.vstack(parts).tocsr()
    kernel = kernel_from_config(kernel)
    if isinstance(kernel, KnnKernel) and kernel.k >= X_all.shape[0]:
        kernel = KnnKernel(X_all.shape[0] - 1)
    graph = build_similarity_graph(X_all, kernel, labeled_count=XL.shape[0])
    result = label_propagation(graph, y_labeled, tol, max_iter)
    k = kernel.k if isinstance(kernel, KnnKernel) else 10
    prior = float(np.mean([parse_label(v) is Label.RELEVANT for v in y_labeled]))
    return PropagationModel(X_all, result.scores, kernel, k, prior), result


# -- co-training -----------------------------------------------------------

@dataclass
class CoTrainState:
    labeled_a: dict[int, Label]
    labeled_b: dict[int, Label]
    unlabeled: list[int]
    confidence_threshold: float = 0.7
    round: int = 0


@dataclass
class CoTrainResult:
    model_a: learners.Model
    model_b: learners.Model
    transcript: list[dict]
    pool_labels: list[Label]       # final label given to each unlabeled input, in input order
    forced: int = 0
    state: CoTrainState | None = field(default=None, repr=False)


def _tag(model: learners.Model, view: str, split: ViewSplit) -> learners.Model:
    meta = {**model.training_meta, "view": view, "view_split": split.fingerprint}
    return learners.Model(model.kind, model.parameters, model.feature_dimension, meta)


def _predicted(conf: np.ndarray):
    """(label, confidence in that label) per row."""
    pos = conf > 0.5
    return np.where(pos, 1, 0), np.where(pos, conf, 1.0 - conf)


def co_train(kind, split: ViewSplit, labeled: Sequence[LabeledExample], unlabeled: Sequence[LabeledExample],
             threshold: float = 0.7, hp=None, seed: int = 0) -> CoTrainResult:
    """Two classifiers on disjoint word views label the unlabeled pool for each other.

    Each round both models score the remaining pool; rows that model A labels
    with confidence >= threshold join B's labeled set and vice versa, then both
    models are retrained from scratch. A round that moves nothing ends the loop:
    every remaining row takes the label of whichever model is more confident.
    """
    labeled = list(labeled)
    unlabeled = list(unlabeled)
    y0 = [parse_label(ex.label) for ex in labeled]
    if set(y0) != {Label.RELEVANT, Label.NOT_RELEVANT}:
        raise learners.TrainingError("co-training needs both classes among the labeled examples")
    everything = labeled + unlabeled
    XA = split.vectorize_many(everything, VIEW_A)
    XB = split.vectorize_many(everything, VIEW_B)
    nl = len(labeled)
    state = CoTrainState(dict(enumerate(y0)), dict(enumerate(y0)), list(range(nl, len(everything))), threshold)
    pool_labels: dict[int, Label] = {}
    lab = (Label.NOT_RELEVANT, Label.RELEVANT)

    def fit(view):
        X, chosen = (XA, state.labeled_a) if view == VIEW_A else (XB, state.labeled_b)
        rows = sorted(chosen)
        return learners.train(kind, X[rows], [chosen[r] for r in rows], hp, seed)

    model_a, model_b = fit(VIEW_A), fit(VIEW_B)
    transcript: list[dict] = []
    forced = 0
    while state.unlabeled:
        state.round += 1
        pool = np.array(state.unlabeled)
        la, ca = _predicted(learners.confidences(model_a, XA[pool]))
        lb, cb = _predicted(learners.confidences(model_b, XB[pool]))
        from_a = ca >= threshold
        from_b = cb >= threshold
        for i in np.flatnonzero(from_a):
            state.labeled_b[int(pool[i])] = lab[la[i]]
        for i in np.flatnonzero(from_b):
            state.labeled_a[int(pool[i])] = lab[lb[i]]
        moved = from_a | from_b
        for i in np.flatnonzero(moved):
            pool_labels[int(pool[i])] = lab[la[i]] if ca[i] >= cb[i] else lab[lb[i]]
        entry = {"round": state.round, "added_to_a": int(from_b.sum()), "added_to_b": int(from_a.sum())}
        if not moved.any():
            use_a = ca >= cb
            for i, r in enumerate(pool.tolist()):
                label = lab[la[i]] if use_a[i] else lab[lb[i]]
                state.labeled_a[r] = label
                state.labeled_b[r] = label
                pool_labels[r] = label
            forced = int(pool.size)
            state.unlabeled = []
            transcript.append({**entry, "remaining": 0, "forced": forced})
        else:
            state.unlabeled = [int(r) for r in pool[~moved]]
            transcript.append({**entry, "remaining": len(state.unlabeled), "forced": 0})
        model_a, model_b = fit(VIEW_A), fit(VIEW_B)

    return CoTrainResult(_tag(model_a, VIEW_A, split), _tag(model_b, VIEW_B, split), transcript,
                         [pool_labels[r] for r in range(nl, len(everything))], forced, state)


def write_transcript(transcript: Sequence[Mapping], path) -> None:
    """One NDJSON line per co-training round."""
    keys = ("round", "added_to_a", "added_to_b", "remaining", "forced")
    lines = [json.dumps({k: entry[k] for k in keys if k in entry}) for entry in transcript]
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def _check_pair(model_a, model_b, split: ViewSplit):
    for model, view in ((model_a, VIEW_A), (model_b, VIEW_B)):
        meta = model.training_meta
        if meta.get("view") != view or meta.get("view_split") != split.fingerprint:
            raise ValueError(f"model for view {view} was not trained on this view split")


def combine_confidences(conf_a: np.ndarray, conf_b: np.ndarray, combine: str = "mean") -> np.ndarray:
    """``mean`` averages the views; ``or`` takes the larger, i.e. RELEVANT if either view says so."""
    if combine == "mean":
        return (np.asarray(conf_a) + np.asarray(conf_b)) / 2.0
    if combine == "or":
        return np.maximum(conf_a, conf_b)
    raise ValueError(f"unknown combination rule {combine!r}")


def co_predict_many(model_a, model_b, split: ViewSplit, examples: Sequence[LabeledExample],
                    combine: str = "mean") -> tuple[list[Label], np.ndarray]:
    _check_pair(model_a, model_b, split)
    ca = learners.confidences(model_a, split.vectorize_many(examples, VIEW_A))
    cb = learners.confidences(model_b, split.vectorize_many(examples, VIEW_B))
    conf = combine_confidences(ca, cb, combine)
    return [Label.RELEVANT if c > 0.5 else Label.NOT_RELEVANT for c in conf], conf


def co_predict(model_a, model_b, split: ViewSplit, example: LabeledExample,
               combine: str = "mean") -> tuple[Label, float]:
    labels, conf = co_predict_many(model_a, model_b, split, [example], combine)
    return labels[0], float(conf[0])
