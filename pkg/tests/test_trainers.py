import numpy as np
import pytest

from darkcti import semisup, synthgen
from darkcti.datamodel import Label, to_example
from darkcti.trainers import (
    ArtifactError,
    CoTrainer,
    Pipeline,
    PropagationTrainer,
    SupervisedTrainer,
    load_fit,
)


@pytest.fixture(scope="module")
def data():
    corpus = synthgen.generate(synthgen.CorpusSpec(n_sites=1, products_per_site=240, positive_rate=0.3, seed=2))
    ex = [to_example(p) for p in corpus.all_products()]
    train = ex[:80]
    pool = [synthgen.unlabeled([p])[0] for p in corpus.all_products()[80:160]]
    return train, [to_example(p) for p in pool], ex[160:]


TRAINERS = [
    SupervisedTrainer("LINEAR_SVM"),
    SupervisedTrainer("NAIVE_BAYES"),
    PropagationTrainer({"type": "KNN", "k": 5}),
    CoTrainer("LOGISTIC_REGRESSION"),
]


@pytest.mark.parametrize("trainer", TRAINERS, ids=lambda t: t.descriptor)
def test_fit_predict_save_load(trainer, data, tmp_path):
    train, pool, test = data
    fit = trainer(train, pool)
    preds = fit.predict(test)
    assert len(preds) == len(test) and set(preds) <= {Label.RELEVANT, Label.NOT_RELEVANT}
    conf = fit.confidences(test)
    assert preds == [Label.RELEVANT if c > 0.5 else Label.NOT_RELEVANT for c in conf]
    fit.save(tmp_path)
    back = load_fit(tmp_path)
    assert np.array_equal(back.confidences(test), conf)
    acc = np.mean([p is ex.label for p, ex in zip(preds, test)])
    assert acc > 0.8


def test_cotrain_writes_transcript(data, tmp_path):
    train, pool, _ = data
    CoTrainer("LINEAR_SVM")(train, pool).save(tmp_path)
    lines = (tmp_path / "transcript.ndjson").read_text().splitlines()
    assert lines and '"round": 1' in lines[0]


def test_descriptors():
    assert SupervisedTrainer("NAIVE_BAYES").descriptor == "NAIVE_BAYES"
    assert PropagationTrainer(semisup.GaussianKernel(0.5)).descriptor == "LABEL_PROP(GAUSSIAN sigma=0.5)"
    assert CoTrainer().descriptor == "CO_TRAIN(LINEAR_SVM, threshold=0.7, mean)"


def test_pipeline_respects_stop_words(data):
    train, _, _ = data
    words = {w for ex in train for w in ex.title_text.split()}
    stop = frozenset(sorted(words)[:5])
    space = Pipeline(stop_words=stop, min_df=1).space(train)
    plain = Pipeline(min_df=1).space(train)
    assert len(space.title_vocab) <= len(plain.title_vocab)


def test_load_missing(tmp_path):
    with pytest.raises(ArtifactError, match="manifest.json"):
        load_fit(tmp_path / "model")
    (tmp_path / "manifest.json").write_text('{"method": "NONE", "files": ["model.json"]}')
    with pytest.raises(ArtifactError, match="model.json"):
        load_fit(tmp_path)
