#!/usr/bin/env python3
"""Character n-grams vs word unigrams on the misspelled synthetic corpus.

Same learner and split for both feature sets; one line per seed.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "tests"))

import experiments  # noqa: E402


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--kind", default="LINEAR_SVM")
    ap.add_argument("--stem", action="store_true", help="crude suffix stemming on the word features")
    a = ap.parse_args(argv)
    print("seed  word_f1  ngram_f1     gap")
    for seed in range(a.seeds):
        p = experiments.ngrams_vs_words(seed, a.kind, a.stem)
        print(f"{seed:4d}  {p.base.f1:7.3f}  {p.other.f1:8.3f}  {p.other.f1 - p.base.f1:+.3f}")


if __name__ == "__main__":
    main()
