"""Score each static preset against interpreter-derived dynamic edges on the mini corpus.

    python scripts/run_minicorpus.py
"""
import argparse

from binflow.evalharness import metrics_markdown, score_minicorpus
from binflow.staticflow import PRESETS


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--preset", action="append", choices=sorted(PRESETS),
                    help="presets to score (default: baseline, c, f, cf)")
    args = ap.parse_args()
    print(metrics_markdown(score_minicorpus(tuple(args.preset or ("baseline", "c", "f", "cf")))))


if __name__ == "__main__":
    main()
