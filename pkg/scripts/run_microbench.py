"""Generate the full microbenchmark corpus, score every preset, and print the tables.

    python scripts/run_microbench.py --out reports/microbench --jobs 4
"""
import argparse
import time
from pathlib import Path

from binflow.evalharness import emit_report, evaluate_corpus, standard_tables, table_markdown, write_records
from binflow.genbench import build_corpus, enumerate_configs


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("reports/microbench"))
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--filter", action="append", default=[], metavar="KEY=VALUE")
    args = ap.parse_args()

    filters = dict(f.split("=", 1) for f in args.filter)
    t0 = time.perf_counter()
    cases = build_corpus(enumerate_configs(filters=filters or None))
    print(f"{len(cases)} unique cases in {time.perf_counter() - t0:.1f}s")
    t0 = time.perf_counter()
    records = evaluate_corpus(cases, jobs=args.jobs)
    print(f"evaluated in {time.perf_counter() - t0:.1f}s")

    args.out.mkdir(parents=True, exist_ok=True)
    write_records(records, args.out / "records.jsonl")
    tables = standard_tables(records)
    for t in tables:
        print()
        print(table_markdown(t))
    for path in emit_report(tables, None, "md", args.out):
        print(f"wrote {path}")


if __name__ == "__main__":
    main()
