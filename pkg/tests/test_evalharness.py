from pathlib import Path

import pytest
from hypothesis import given
from hypothesis import strategies as st

from binflow.dynflow import DataFlowGraph, Scope
from binflow.evalharness import (
    EdgeVerdict, EvalRecord, MetricsReport, ReportTable, compare_edge, emit_report, evaluate_case,
    evaluate_corpus, format_pct, read_records, read_report, score_against_dynamic, standard_tables,
    table_csv, table_markdown, tabulate_microbench, write_records,
)
from binflow.fixtures import listing, marked
from binflow.genbench import build_corpus, enumerate_configs

GOLDEN = Path(__file__).parent / "golden"


def _truth(p):
    from binflow.genbench import AliasClass, Degree, GroundTruthRecord, PointerOrigin, Specification
    w, r = marked(p)
    f = AliasClass(PointerOrigin.FOREIGN, PointerOrigin.FOREIGN)
    return GroundTruthRecord(Degree.IMPOSSIBLE, Specification.FULL, f, w, r)


def test_compare_edge():
    from binflow.staticflow import analyze_function, preset
    p = listing("impossible")
    t = _truth(p)
    f = p.functions["f_target"]
    assert compare_edge(analyze_function(p, f, None, preset("baseline")), t) is EdgeVerdict.EDGE
    assert compare_edge(analyze_function(p, f, None, preset("angr-cf")), t) is EdgeVerdict.NO_EDGE
    with pytest.raises(ValueError):
        compare_edge(DataFlowGraph({1, 2}), t)


def test_compare_edge_is_pure():
    from binflow.staticflow import analyze_function
    p = listing("unconditional")
    g = analyze_function(p, p.functions["f_target"])
    before = (set(g.nodes), dict(g.edges))
    assert compare_edge(g, _truth(p)) is compare_edge(g, _truth(p)) is EdgeVerdict.EDGE
    assert (g.nodes, g.edges) == before


def test_generated_stack_byte_case_has_edge_everywhere():
    case = build_corpus(enumerate_configs(filters={
        "origin": "Stack", "elem_size": "1", "length": "1", "expansion": "SamePointer",
        "callee": "NoCall", "frame": "OmitFramePointer", "read_width": "native"}))[0]
    rec = evaluate_case(case)
    assert set(rec.verdicts.values()) == {EdgeVerdict.EDGE}


def test_metric_examples():
    vii = MetricsReport.from_counts(1014, 7087, 1570)
    assert vii.precision_lower == pytest.approx(0.1252, abs=5e-5)
    assert vii.recall_est == pytest.approx(0.3924, abs=5e-5)
    assert vii.f1_est == pytest.approx(0.1898, abs=5e-5)
    ix = MetricsReport.from_counts(2569, 5351, 15)
    assert (ix.precision_lower, ix.recall_est, ix.f1_est) == pytest.approx((0.3244, 0.9942, 0.4891), abs=5e-5)


def test_score_equal_sets():
    edges = {(1, 2, "mem"), (2, 3, "rax")}
    m = score_against_dynamic(edges, edges)
    assert (m.precision_lower, m.recall_est, m.f1_est) == (1.0, 1.0, 1.0)
    g = DataFlowGraph()
    g.add(1, 2, "mem", Scope.INTER)
    assert score_against_dynamic(g, {(1, 2, "mem")}).tp_lower == 1  # scope is ignored


def test_undefined_metrics():
    m = MetricsReport.from_counts(0, 0, 0)
    assert m.precision_lower is None and m.recall_est is None and m.f1_est is None
    assert MetricsReport.from_counts(0, 3, 2).f1_est == 0.0
    with pytest.raises(ValueError):
        MetricsReport.from_counts(-1, 0, 0)


@given(st.integers(0, 10**6), st.integers(0, 10**6), st.integers(0, 10**6))
def test_metric_bounds(tp, fp, fn):
    m = MetricsReport.from_counts(tp, fp, fn)
    for x in (m.precision_lower, m.recall_est, m.f1_est):
        assert x is None or 0 <= x <= 1
    if m.f1_est is not None:
        assert m.f1_est <= max(m.precision_lower, m.recall_est) + 1e-12


def test_format_pct():
    assert format_pct(21, 104) == "20.19%"
    assert format_pct(1, 8) == "12.50%"
    assert format_pct(1, 800) == "0.12%"  # 0.125 rounds half to even
    assert format_pct(3, 800) == "0.38%"  # 0.375 rounds half to even
    assert format_pct(0, 0) == "-"


@given(st.integers(1, 10**5), st.data())
def test_percentages_sum(total, data):
    e = data.draw(st.integers(0, total))
    a, b = format_pct(e, total), format_pct(total - e, total)
    assert abs(float(a[:-1]) + float(b[:-1]) - 100) <= 0.01 + 1e-9


def _record(i, ac, degree, callee, base, c):
    spec = "Underspecified" if degree == "Possible" else "FullySpecified"
    return EvalRecord(f"case_{i:05d}", ac, degree, spec, {"callee": callee},
                      {"baseline": EdgeVerdict(base), "c": EdgeVerdict(c)})


def _callee_records():
    recs, n = [], 0
    for ac in ("(S, S)", "(F, F)"):
        for _ in range(3):
            recs.append(_record(n, ac, "Unconditional", "NoCall", "Edge", "Edge"))
            recs.append(_record(n + 1, ac, "Possible", "CallBetween", "NoEdge", "Edge"))
            n += 2
    recs.append(_record(n, "(F, F)", "Possible", "CallBetween", "NoEdge", "NoEdge"))
    return recs


def test_single_group_all_edge():
    recs = [_record(i, "(S, S)", "Unconditional", "NoCall", "Edge", "Edge") for i in range(10)]
    t = tabulate_microbench(recs, ("alias_class",), ("baseline",))
    assert len(t.rows) == 1
    assert t.cells(t.rows[0]) == ["(S, S)", "10", "100.00%", "0", "0.00%", "10"]
    with pytest.raises(ValueError):
        tabulate_microbench([], ("alias_class",))


def test_markdown_snapshot():
    t = tabulate_microbench(_callee_records(), ("alias_class", "degree", "callee"), ("baseline", "c"),
                            "callee_effect")
    assert table_markdown(t) == (GOLDEN / "callee_effect.md").read_text()


def test_rows_are_deterministic():
    recs = _callee_records()
    a = tabulate_microbench(recs, ("alias_class", "degree"), title="x")
    b = tabulate_microbench(list(reversed(recs)), ("alias_class", "degree"), title="x")
    assert a == b
    for r in a.rows:
        for c in a.configs:
            e, total = r.counts[c]
            assert 0 <= e <= total == r.total


def test_header_only_csv(tmp_path):
    t = ReportTable("empty", ("alias_class",), ("baseline",))
    assert table_csv(t) == "alias_class,baseline Edge,baseline Edge %,baseline NoEdge,baseline NoEdge %,Total\n"
    paths = emit_report([t], None, "csv", tmp_path)
    assert paths[0].read_text().count("\n") == 1


def test_json_round_trip(tmp_path):
    tables = [tabulate_microbench(_callee_records(), ("alias_class", "callee"), title="t")]
    metrics = {"cf": MetricsReport.from_counts(3, 1, 0), "none": MetricsReport.from_counts(0, 0, 0)}
    (path,) = emit_report(tables, metrics, "json", tmp_path)
    assert read_report(path) == (tables, metrics)
    with pytest.raises(ValueError):
        emit_report(tables, metrics, "xml", tmp_path)


def test_markdown_and_csv_outputs(tmp_path):
    tables = [tabulate_microbench(_callee_records(), ("alias_class",), title="t")]
    metrics = {"cf": MetricsReport.from_counts(3, 1, 0)}
    (md,) = emit_report(tables, metrics, "md", tmp_path)
    assert "### t" in md.read_text() and "0.7500" in md.read_text()
    paths = emit_report(tables, metrics, "csv", tmp_path)
    assert sorted(p.name for p in paths) == ["report_metrics.csv", "report_t.csv"]


def test_records_round_trip_and_parallel_agree(tmp_path):
    cases = build_corpus(enumerate_configs(filters={"origin": "Foreign", "elem_size": "8", "length": "2",
                                                    "frame": "FramePointer"}))
    serial = evaluate_corpus(cases, ("baseline", "cf"))
    parallel = evaluate_corpus(cases, ("baseline", "cf"), jobs=2)
    assert serial == parallel
    path = write_records(serial, tmp_path / "r.jsonl")
    assert read_records(path) == serial
    tables = standard_tables(serial)
    assert [t.title for t in tables] == ["by_alias_class"]
    with pytest.raises(FileNotFoundError, match="binflow evaluate"):
        read_records(tmp_path / "missing.jsonl")
