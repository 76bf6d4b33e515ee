"""Command-line entry point: ``binflow <subcommand>``."""
from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

from . import evalharness as eh
from .dynflow import intraprocedural_dfg, write_dfg
from .fixtures import check_fixtures
from .genbench import (
    TARGET_NAME, GeneratorSettings, build_corpus, enumerate_configs, environments, load_case,
    read_manifest, write_corpus,
)
from .interp import (
    Environment, ExecutionError, InconclusiveOracle, MemoryFault, emit_trace, oracle_data_flow, run,
)
from .isa import parse_program
from .staticflow import AnalysisConfig, analyze, preset


def _kv(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected KEY=VALUE, got {text!r}")
    k, v = text.split("=", 1)
    return k.strip(), v.strip()


def _case_dirs(target: Path) -> tuple[Path, list[dict]]:
    """(corpus root, manifest entries) for a corpus directory or one case directory."""
    target = Path(target)
    if (target / "manifest.jsonl").exists():
        return target, read_manifest(target)
    if (target / "test.s").exists() and (target.parent / "manifest.jsonl").exists():
        entries = [e for e in read_manifest(target.parent) if e["case"] == target.name]
        if entries:
            return target.parent, entries
    raise FileNotFoundError(
        f"{target} is neither a corpus nor a case directory; create one with `binflow generate OUTDIR`")


def cmd_generate(args) -> int:
    settings = GeneratorSettings(mixed_width_reads=not args.no_mixed_width)
    t0 = time.perf_counter()
    configs = enumerate_configs(settings, dict(args.filter))
    cases = build_corpus(configs)
    write_corpus(cases, args.outdir, oracle=args.oracle)
    print(f"{len(configs)} configurations, {len(cases)} unique cases -> {args.outdir} "
          f"({time.perf_counter() - t0:.1f}s)")
    return 0


def cmd_run_dynamic(args) -> int:
    if args.target.suffix == ".s":
        p = parse_program(args.target.read_text())
        regs = {k: int(v, 0) for k, v in args.reg}
        events, _ = run(p, args.entry or next(iter(p.functions)), Environment(regs))
        emit_trace(events, sys.stdout)
        return 0
    root, entries = _case_dirs(args.target)
    counts: dict[str, int] = {}
    for e in entries:
        case = load_case(root, e)
        envs = environments(case.config, case.program, case.truth)
        traces = []
        for env in envs:
            try:
                traces.append(run(case.program, TARGET_NAME, env)[0])
            except MemoryFault:
                continue
        d = root / case.case_id
        intra, _ = intraprocedural_dfg(traces, case.program, TARGET_NAME)
        with (d / "dynamic_dfg.json").open("w") as fh:
            write_dfg(intra, fh)
        if args.traces and traces:
            with (d / "trace.jsonl").open("w") as fh:
                emit_trace(traces[0], fh)
        try:
            verdict = oracle_data_flow(case.program, case.truth.write_addr, case.truth.read_addr, envs,
                                       TARGET_NAME).value
        except InconclusiveOracle:
            verdict = "Inconclusive"
        counts[verdict] = counts.get(verdict, 0) + 1
        (d / "oracle.json").write_text(json.dumps({"verdict": verdict}) + "\n")
    print(f"{len(entries)} cases: " + ", ".join(f"{k}={v}" for k, v in sorted(counts.items())))
    return 0


def _config_from_args(args) -> tuple[str, AnalysisConfig]:
    cfg = AnalysisConfig(args.c1, args.c2, args.f) if args.c1 or args.c2 or args.f else preset(args.preset)
    return cfg.name, cfg


def cmd_analyze_static(args) -> int:
    name, cfg = _config_from_args(args)
    if args.target.suffix == ".s":
        p = parse_program(args.target.read_text())
        f = p.functions[args.function or next(iter(p.functions))]
        write_dfg(analyze(p, f, None, cfg).dfg, sys.stdout)
        return 0
    root, entries = _case_dirs(args.target)
    edges = 0
    for e in entries:
        case = load_case(root, e)
        res = analyze(case.program, case.program.functions[TARGET_NAME], None, cfg)
        with (root / case.case_id / f"static_{name}.json").open("w") as fh:
            write_dfg(res.dfg, fh)
        edges += eh.compare_edge(res.dfg, case.truth) is eh.EdgeVerdict.EDGE
    print(f"{len(entries)} cases analyzed with {name}: {edges} report the write->read edge")
    return 0


def cmd_evaluate(args) -> int:
    root, entries = _case_dirs(args.corpus)
    cases = [load_case(root, e) for e in entries]
    t0 = time.perf_counter()
    records = eh.evaluate_corpus(cases, args.presets, jobs=args.jobs)
    path = eh.write_records(records, args.reports / "records.jsonl")
    tables = eh.standard_tables(records)
    eh.emit_report(tables, None, "markdown", args.reports)
    print(eh.table_markdown(tables[0]))
    print(f"{len(records)} records -> {path} ({time.perf_counter() - t0:.1f}s)")
    return 0


def cmd_report(args) -> int:
    records = eh.read_records(args.reports / "records.jsonl")
    tables = eh.standard_tables(records) if records else []
    metrics = eh.score_minicorpus() if args.minicorpus else None
    for p in eh.emit_report(tables, metrics, args.format, args.reports):
        print(p)
    return 0


def cmd_fixtures(args) -> int:
    t0 = time.perf_counter()
    results = check_fixtures(args.preset)
    for r in results:
        found = ", ".join(f"({s:#x},{d:#x})" for s, d in sorted(r.present)) or "none"
        status = "ok" if r.ok else "MISMATCH"
        print(f"{r.name}: {status}; expected edges reported: {found}")
        for s, d in sorted(r.missing):
            print(f"  missing ({s:#x},{d:#x})")
        for s, d in sorted(r.unexpected):
            print(f"  unexpected ({s:#x},{d:#x})")
    print(f"{args.preset}: {sum(r.ok for r in results)}/{len(results)} fixtures pass "
          f"({time.perf_counter() - t0:.2f}s)")
    return 0 if all(r.ok for r in results) else 1


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="binflow", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="synthesize the microbenchmark corpus")
    g.add_argument("outdir", type=Path)
    g.add_argument("--filter", type=_kv, action="append", default=[], metavar="KEY=VALUE",
                   help="keep configurations whose KEY matches VALUE (repeatable)")
    g.add_argument("--oracle", action="store_true", help="also record the interpreter oracle verdict")
    g.add_argument("--no-mixed-width", action="store_true", help="omit the wide-read variants")
    g.set_defaults(func=cmd_generate)

    r = sub.add_parser("run-dynamic", help="execute cases and build dynamic data-flow graphs")
    r.add_argument("target", type=Path, help="corpus dir, case dir, or .s file")
    r.add_argument("--traces", action="store_true", help="keep one trace per case")
    r.add_argument("--entry", help="entry function for a .s file")
    r.add_argument("--reg", type=_kv, action="append", default=[], metavar="REG=VALUE",
                   help="initial register value for a .s file (repeatable)")
    r.set_defaults(func=cmd_run_dynamic)

    s = sub.add_parser("analyze-static", help="run the static analysis")
    s.add_argument("target", type=Path, help="corpus dir, case dir, or .s file")
    s.add_argument("--preset", default="baseline", choices=sorted(eh.PRESETS))
    s.add_argument("--c1", action="store_true", help="preserve memory definitions across calls")
    s.add_argument("--c2", action="store_true", help="preserve the stack frame across calls")
    s.add_argument("--f", action="store_true", help="field disunion for unknown bases")
    s.add_argument("--function", help="function to analyze in a .s file")
    s.set_defaults(func=cmd_analyze_static)

    e = sub.add_parser("evaluate", help="score every preset on a corpus")
    e.add_argument("corpus", type=Path)
    e.add_argument("--presets", nargs="+", default=list(eh.STANDARD_PRESETS), choices=sorted(eh.PRESETS))
    e.add_argument("--jobs", type=int, default=1)
    e.add_argument("--reports", type=Path, default=Path("reports"))
    e.set_defaults(func=cmd_evaluate)

    rp = sub.add_parser("report", help="render stored evaluation records")
    rp.add_argument("--format", choices=["csv", "markdown", "md", "json"], default="markdown")
    rp.add_argument("--reports", type=Path, default=Path("reports"))
    rp.add_argument("--minicorpus", action="store_true",
                    help="add precision/recall against the bundled multi-block functions")
    rp.set_defaults(func=cmd_report)

    fx = sub.add_parser("fixtures", help="check the CVE regression fixtures")
    fx.add_argument("--preset", default="angr-cf", choices=sorted(eh.PRESETS))
    fx.set_defaults(func=cmd_fixtures)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"binflow: error: {exc}", file=sys.stderr)
        return 2
    except ExecutionError as exc:
        print(f"binflow: execution failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
