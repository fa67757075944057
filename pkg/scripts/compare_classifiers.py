#!/usr/bin/env python3
"""Compare learners and semi-supervised methods on the synthetic corpora.

Prints leave-one-site-out precision/recall/F1 on the market corpus for each
supervised learner and for label propagation, then the per-seed pool recall
and precision of co-training against a supervised SVM on the dual-view corpus.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "tests"))

import experiments  # noqa: E402
from darkcti import evalharness  # noqa: E402
from darkcti.trainers import PropagationTrainer, SupervisedTrainer  # noqa: E402

KINDS = ("NAIVE_BAYES", "LOGISTIC_REGRESSION", "LINEAR_SVM", "RANDOM_FOREST")


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--cotrain-seeds", type=int, default=3, help="0 skips the co-training comparison")
    a = ap.parse_args(argv)

    reports = {}
    for trainer in [SupervisedTrainer(k, seed=a.seed) for k in KINDS] + [PropagationTrainer()]:
        rep = experiments.market_lomo(a.seed, trainer)
        reports[rep.trainer] = rep
        print(f"done {rep.trainer}", file=sys.stderr)
    print(evalharness.format_table(reports))

    if a.cotrain_seeds:
        print("\nseed  svm_recall  svm_precision  ct_recall  ct_precision")
        for seed in range(a.cotrain_seeds):
            p = experiments.cotrain_vs_supervised(seed)
            print(f"{seed:4d}  {p.base.recall:10.3f}  {p.base.precision:13.3f}  "
                  f"{p.other.recall:9.3f}  {p.other.precision:12.3f}")


if __name__ == "__main__":
    main()
