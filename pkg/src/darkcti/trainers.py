"""Trainer factories for the evaluation protocols and the command line.

A trainer is called with (labeled examples, unlabeled pool) and returns a
fitted object whose ``predict`` maps examples to labels, so it plugs straight
into ``evalharness.leave_one_site_out`` and ``kfold``. Fitted objects save to
and load from a directory.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from darkcti import learners, semisup, textpipe
from darkcti.datamodel import Label, LabeledExample

MANIFEST = "manifest.json"


class ArtifactError(FileNotFoundError):
    """A saved model directory is missing or incomplete."""


@dataclass(frozen=True)
class Pipeline:
    n_min: int = 3
    n_max: int = 7
    min_df: int = 2
    stop_words: frozenset[str] = frozenset()

    def space(self, corpus: Sequence[LabeledExample]) -> textpipe.FeatureSpace:
        return textpipe.build_feature_space(corpus, self.n_min, self.n_max, self.stop_words, self.min_df)


def _labels(examples) -> list[Label]:
    return [ex.label for ex in examples]


# -- fitted objects --------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SupervisedFit:
    space: textpipe.FeatureSpace
    model: learners.Model

    def confidences(self, examples) -> np.ndarray:
        return learners.confidences(self.model, textpipe.vectorize_many(list(examples), self.space))

    def predict(self, examples) -> list[Label]:
        return learners.predict_many(self.model, textpipe.vectorize_many(list(examples), self.space))

    __call__ = predict

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        self.space.save(out / "feature_space.json")
        learners.save_model(self.model, out / "model.json")
        _manifest(out, "NONE", ["feature_space.json", "model.json"])


@dataclass(frozen=True, eq=False)
class PropagationFit:
    space: textpipe.FeatureSpace
    model: semisup.PropagationModel
    result: semisup.PropagationResult | None = None

    def confidences(self, examples) -> np.ndarray:
        return self.model.confidences(textpipe.vectorize_many(list(examples), self.space))

    def predict(self, examples) -> list[Label]:
        return self.model.predict_many(textpipe.vectorize_many(list(examples), self.space))

    __call__ = predict

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        self.space.save(out / "feature_space.json")
        semisup.save_propagation_model(self.model, out / "propagation.json")
        _manifest(out, "LABEL_PROP", ["feature_space.json", "propagation.json"])


@dataclass(frozen=True, eq=False)
class CoTrainFit:
    split: textpipe.ViewSplit
    model_a: learners.Model
    model_b: learners.Model
    combine: str = "mean"
    transcript: tuple = ()

    def confidences(self, examples) -> np.ndarray:
        return semisup.co_predict_many(self.model_a, self.model_b, self.split, list(examples), self.combine)[1]

    def predict(self, examples) -> list[Label]:
        return semisup.co_predict_many(self.model_a, self.model_b, self.split, list(examples), self.combine)[0]

    __call__ = predict

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        self.split.save(out / "view_split.json")
        learners.save_model(self.model_a, out / "model_a.json")
        learners.save_model(self.model_b, out / "model_b.json")
        semisup.write_transcript(self.transcript, out / "transcript.ndjson")
        _manifest(out, "CO_TRAIN", ["view_split.json", "model_a.json", "model_b.json"], combine=self.combine)


def _manifest(out: Path, method: str, files: list[str], **extra) -> None:
    (out / MANIFEST).write_text(json.dumps({"method": method, "files": files, **extra}, sort_keys=True) + "\n",
                                encoding="utf-8")


def load_fit(model_dir):
    """Inverse of the ``save`` methods above."""
    d = Path(model_dir)
    if not (d / MANIFEST).exists():
        raise ArtifactError(f"no trained model at {d / MANIFEST}")
    meta = json.loads((d / MANIFEST).read_text(encoding="utf-8"))
    for name in meta["files"]:
        if not (d / name).exists():
            raise ArtifactError(f"model artifact missing: {d / name}")
    method = meta["method"]
    if method == "NONE":
        return SupervisedFit(textpipe.FeatureSpace.load(d / "feature_space.json"), learners.load_model(d / "model.json"))
    if method == "LABEL_PROP":
        return PropagationFit(textpipe.FeatureSpace.load(d / "feature_space.json"),
                              semisup.load_propagation_model(d / "propagation.json"))
    if method == "CO_TRAIN":
        return CoTrainFit(textpipe.ViewSplit.load(d / "view_split.json"), learners.load_model(d / "model_a.json"),
                          learners.load_model(d / "model_b.json"), meta.get("combine", "mean"))
    raise ArtifactError(f"unknown model method {method!r} in {d / MANIFEST}")


# -- trainers --------------------------------------------------------------

@dataclass(frozen=True)
class SupervisedTrainer:
    kind: str = "LINEAR_SVM"
    hyperparams: Mapping | None = None
    pipeline: Pipeline = Pipeline()
    seed: int = 0

    @property
    def descriptor(self) -> str:
        return learners.ModelKind(self.kind).value

    def __call__(self, train: Sequence[LabeledExample], pool: Sequence[LabeledExample] = ()) -> SupervisedFit:
        space = self.pipeline.space(train)
        model = learners.train(self.kind, textpipe.vectorize_many(list(train), space), _labels(train),
                               self.hyperparams, self.seed)
        return SupervisedFit(space, model)


@dataclass(frozen=True)
class PropagationTrainer:
    kernel: Mapping | semisup.KnnKernel | semisup.GaussianKernel = semisup.KnnKernel()
    pipeline: Pipeline = Pipeline()
    tol: float = 1e-6

    @property
    def descriptor(self) -> str:
        k = semisup.kernel_from_config(self.kernel)
        return f"LABEL_PROP({'KNN k=%d' % k.k if isinstance(k, semisup.KnnKernel) else 'GAUSSIAN sigma=%g' % k.sigma})"

    def __call__(self, train: Sequence[LabeledExample], pool: Sequence[LabeledExample] = ()) -> PropagationFit:
        train, pool = list(train), list(pool)
        # the vocabulary may use unlabeled text; labels only come from ``train``
        space = self.pipeline.space(train + pool)
        XU = textpipe.vectorize_many(pool, space) if pool else None
        model, result = semisup.fit_propagation(textpipe.vectorize_many(train, space), _labels(train), XU,
                                                self.kernel, self.tol)
        return PropagationFit(space, model, result)


@dataclass(frozen=True)
class CoTrainer:
    kind: str = "LINEAR_SVM"
    hyperparams: Mapping | None = None
    pipeline: Pipeline = Pipeline()
    threshold: float = 0.7
    combine: str = "mean"
    seed: int = 0

    @property
    def descriptor(self) -> str:
        return f"CO_TRAIN({learners.ModelKind(self.kind).value}, threshold={self.threshold:g}, {self.combine})"

    def __call__(self, train: Sequence[LabeledExample], pool: Sequence[LabeledExample] = ()) -> CoTrainFit:
        train, pool = list(train), list(pool)
        p = self.pipeline
        split = textpipe.split_views(train + pool, p.n_min, p.n_max, p.stop_words, p.min_df, self.seed)
        res = semisup.co_train(self.kind, split, train, pool, self.threshold, self.hyperparams, self.seed)
        return CoTrainFit(split, res.model_a, res.model_b, self.combine, tuple(res.transcript))


def from_run_config(cfg, hyperparams: Mapping | None = None):
    """Trainer described by a ``config.RunConfig``; ``hyperparams`` overrides the configured ones."""
    pipe = Pipeline(cfg.pipeline.n_min, cfg.pipeline.n_max, cfg.pipeline.min_df, cfg.pipeline.stop_word_set())
    hp = dict(cfg.model.hyperparams) if hyperparams is None else dict(hyperparams)
    method = cfg.semisup.method
    if method == "LABEL_PROP":
        return PropagationTrainer(semisup.kernel_from_config(cfg.semisup.kernel), pipe, cfg.semisup.tol)
    if method == "CO_TRAIN":
        return CoTrainer(cfg.model.kind, hp, pipe, cfg.semisup.threshold, cfg.semisup.combine, cfg.seed)
    return SupervisedTrainer(cfg.model.kind, hp, pipe, cfg.seed)
