"""Scoring static data-flow graphs against ground truth and dynamic graphs."""
from __future__ import annotations

import csv
import enum
import io
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from decimal import ROUND_HALF_EVEN, Decimal
from pathlib import Path
from typing import Iterable, Sequence

from .dynflow import DataFlowGraph
from .genbench import ORIGINS, TARGET_NAME, CorpusCase, Degree, GroundTruthRecord, Specification
from .staticflow import PRESETS, AnalysisConfig, analyze_function

STANDARD_PRESETS = ("baseline", "c", "f", "cf")


class EdgeVerdict(str, enum.Enum):
    EDGE = "Edge"
    NO_EDGE = "NoEdge"


def compare_edge(dfg: DataFlowGraph, truth: GroundTruthRecord) -> EdgeVerdict:
    """Edge iff the write-to-read memory edge of ``truth`` is in ``dfg``."""
    for a in (truth.write_addr, truth.read_addr):
        if a not in dfg.nodes:
            raise ValueError(f"address 0x{a:x} is not in the analyzed function")
    hit = dfg.has_edge(truth.write_addr, truth.read_addr, truth.channel)
    return EdgeVerdict.EDGE if hit else EdgeVerdict.NO_EDGE


@dataclass
class EvalRecord:
    case_id: str
    alias_class: str
    degree: str
    specification: str
    variant: dict[str, str]  # generator keys of the case's configuration
    verdicts: dict[str, EdgeVerdict] = field(default_factory=dict)  # one per analysis config

    def keys(self) -> dict[str, str]:
        return {"alias_class": self.alias_class, "degree": self.degree,
                "specification": self.specification, **self.variant}

    def to_json(self) -> dict:
        d = asdict(self)
        d["verdicts"] = {k: v.value for k, v in self.verdicts.items()}
        return d

    @classmethod
    def from_json(cls, d: dict) -> "EvalRecord":
        return cls(d["case_id"], d["alias_class"], d["degree"], d["specification"], dict(d["variant"]),
                   {k: EdgeVerdict(v) for k, v in d["verdicts"].items()})


def _resolve_configs(configs) -> dict[str, AnalysisConfig]:
    if configs is None:
        configs = STANDARD_PRESETS
    if isinstance(configs, dict):
        return dict(configs)
    return {name: PRESETS[name] for name in configs}


def evaluate_case(case: CorpusCase, configs=None) -> EvalRecord:
    configs = _resolve_configs(configs)
    f = case.program.functions[TARGET_NAME]
    rec = EvalRecord(case.case_id, str(case.truth.alias_class), case.truth.degree.value,
                     case.truth.specification.value, case.config.keys())
    for name, cfg in configs.items():
        rec.verdicts[name] = compare_edge(analyze_function(case.program, f, None, cfg), case.truth)
    return rec


def _evaluate_chunk(args) -> list[EvalRecord]:
    cases, configs = args
    return [evaluate_case(c, configs) for c in cases]


def evaluate_corpus(cases: Sequence[CorpusCase], configs=None, jobs: int = 1) -> list[EvalRecord]:
    """Evaluate every case; with ``jobs > 1`` cases are split across processes."""
    configs = _resolve_configs(configs)
    if jobs <= 1 or len(cases) < 2 * jobs:
        return [evaluate_case(c, configs) for c in cases]
    size = -(-len(cases) // (4 * jobs))
    chunks = [(list(cases[k:k + size]), configs) for k in range(0, len(cases), size)]
    with ProcessPoolExecutor(jobs) as ex:
        return [r for part in ex.map(_evaluate_chunk, chunks) for r in part]


# ---------------------------------------------------------------------------
# tables


def format_pct(n: int, total: int) -> str:
    """Two-decimal percentage, rounded half to even."""
    if total == 0:
        return "-"
    q = (Decimal(100) * n / Decimal(total)).quantize(Decimal("0.01"), rounding=ROUND_HALF_EVEN)
    return f"{q}%"


_ORDER = {
    "degree": [d.value for d in (Degree.UNCONDITIONAL, Degree.POSSIBLE, Degree.IMPOSSIBLE)],
    "specification": [s.value for s in (Specification.FULL, Specification.UNDER)],
    "callee": ["NoCall", "CallBetween"],
    "equal_offset": ["Yes", "No"],
}


def _rank(name: str, value: str):
    if name == "alias_class":
        short = [o.short for o in ORIGINS]
        parts = value.strip("()").split(", ")
        return tuple(short.index(p) if p in short else len(short) for p in parts), value
    order = _ORDER.get(name)
    if order and value in order:
        return (order.index(value),), value
    return (len(order or ()),), value


@dataclass
class ReportRow:
    key: tuple[str, ...]
    counts: dict[str, tuple[int, int]]  # config -> (edge count, total)

    @property
    def total(self) -> int:
        return next(iter(self.counts.values()))[1] if self.counts else 0


@dataclass
class ReportTable:
    title: str
    group_by: tuple[str, ...]
    configs: tuple[str, ...]
    rows: list[ReportRow] = field(default_factory=list)

    def header(self) -> list[str]:
        cols = list(self.group_by)
        for c in self.configs:
            cols += [f"{c} Edge", f"{c} Edge %", f"{c} NoEdge", f"{c} NoEdge %"]
        return cols + ["Total"]

    def cells(self, row: ReportRow) -> list[str]:
        out = list(row.key)
        for c in self.configs:
            e, t = row.counts[c]
            out += [str(e), format_pct(e, t), str(t - e), format_pct(t - e, t)]
        return out + [str(row.total)]

    def changed(self, row: ReportRow, config: str) -> bool:
        """Whether ``config``'s Edge share differs from the first config's."""
        ref = row.counts[self.configs[0]]
        e, t = row.counts[config]
        return e * ref[1] != ref[0] * t

    def to_json(self) -> dict:
        return {"title": self.title, "group_by": list(self.group_by), "configs": list(self.configs),
                "rows": [{"key": list(r.key), "counts": {c: list(v) for c, v in r.counts.items()}}
                         for r in self.rows]}

    @classmethod
    def from_json(cls, d: dict) -> "ReportTable":
        rows = [ReportRow(tuple(r["key"]), {c: tuple(v) for c, v in r["counts"].items()}) for r in d["rows"]]
        return cls(d["title"], tuple(d["group_by"]), tuple(d["configs"]), rows)


def tabulate_microbench(records: Sequence[EvalRecord], group_by: Sequence[str],
                        configs: Sequence[str] | None = None, title: str = "",
                        where: dict[str, str] | None = None) -> ReportTable:
    """Edge/NoEdge counts per group of records, one column block per config."""
    if not records:
        raise ValueError("no records to tabulate")
    configs = tuple(configs or records[0].verdicts)
    groups: dict[tuple[str, ...], dict[str, list[int]]] = {}
    for r in records:
        k = r.keys()
        if where and any(k.get(n) != v for n, v in where.items()):
            continue
        key = tuple(k[g] for g in group_by)
        slot = groups.setdefault(key, {c: [0, 0] for c in configs})
        for c in configs:
            slot[c][0] += r.verdicts[c] is EdgeVerdict.EDGE
            slot[c][1] += 1
    ordered = sorted(groups, key=lambda key: [_rank(n, v) for n, v in zip(group_by, key)])
    rows = [ReportRow(key, {c: tuple(groups[key][c]) for c in configs}) for key in ordered]
    return ReportTable(title, tuple(group_by), configs, rows)


def standard_tables(records: Sequence[EvalRecord]) -> list[ReportTable]:
    """Per-class overview, callee effect, and offset effect tables."""
    configs = [c for c in STANDARD_PRESETS if c in records[0].verdicts]
    tables = [tabulate_microbench(records, ("alias_class", "degree"), configs, "by_alias_class")]
    if {"baseline", "c"} <= set(configs):
        tables.append(tabulate_microbench(
            records, ("alias_class", "degree", "callee"), ("baseline", "c"), "callee_effect",
            where={"expansion": "SamePointer", "xforms": "None"}))
    if {"baseline", "f"} <= set(configs):
        tables.append(tabulate_microbench(
            records, ("alias_class", "degree", "equal_offset"), ("baseline", "f"), "offset_effect",
            where={"specification": Specification.FULL.value}))
    return tables


# ---------------------------------------------------------------------------
# metrics


@dataclass(frozen=True)
class MetricsReport:
    tp_lower: int
    fp_upper: int
    fn_lower: int
    precision_lower: float | None
    recall_est: float | None
    f1_est: float | None

    @classmethod
    def from_counts(cls, tp: int, fp: int, fn: int) -> "MetricsReport":
        if min(tp, fp, fn) < 0:
            raise ValueError("counts must be non-negative")
        p = tp / (tp + fp) if tp + fp else None
        r = tp / (tp + fn) if tp + fn else None
        if p is None or r is None:
            f1 = None
        else:
            f1 = 2 * p * r / (p + r) if p + r else 0.0
        return cls(tp, fp, fn, p, r, f1)

    def to_json(self) -> dict:
        return asdict(self)


EdgeSet = set  # of (src, dst, channel)


def _edges(x) -> set:
    if isinstance(x, DataFlowGraph):
        return x.edge_set()
    return {tuple(e[:3]) for e in x}


def score_against_dynamic(S, D) -> MetricsReport:
    """Bounds from static edges S and dynamic edges D; scope is ignored."""
    s, d = _edges(S), _edges(D)
    return MetricsReport.from_counts(len(d & s), len(s - d), len(d - s))


def score_minicorpus(configs=None) -> dict[str, MetricsReport]:
    """Pooled metrics per config over the bundled multi-block functions."""
    from .minicorpus import dynamic_edges, mini_corpus
    configs = _resolve_configs(configs)
    totals = {name: [0, 0, 0] for name in configs}
    for case in mini_corpus():
        p = case.program()
        d = dynamic_edges(case, p)
        for name, cfg in configs.items():
            m = score_against_dynamic(analyze_function(p, p.functions[case.name], None, cfg), d)
            t = totals[name]
            t[0] += m.tp_lower
            t[1] += m.fp_upper
            t[2] += m.fn_lower
    return {name: MetricsReport.from_counts(*t) for name, t in totals.items()}


# ---------------------------------------------------------------------------
# serialization

FORMATS = ("csv", "markdown", "json")
_METRIC_COLS = ("name", "tp_lower", "fp_upper", "fn_lower", "precision_lower", "recall_est", "f1_est")


def _fmt_ratio(x: float | None) -> str:
    return "undefined" if x is None else f"{x:.4f}"


def _metric_row(name: str, m: MetricsReport) -> list[str]:
    return [name, str(m.tp_lower), str(m.fp_upper), str(m.fn_lower),
            _fmt_ratio(m.precision_lower), _fmt_ratio(m.recall_est), _fmt_ratio(m.f1_est)]


def table_csv(t: ReportTable) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(t.header())
    for r in t.rows:
        w.writerow(t.cells(r))
    return buf.getvalue()


def table_markdown(t: ReportTable) -> str:
    """Markdown table; Edge % cells that differ from the first config are bold."""
    head = t.header()
    lines = [f"### {t.title}", "", "| " + " | ".join(head) + " |",
             "|" + "|".join("---" if n < len(t.group_by) else "---:" for n in range(len(head))) + "|"]
    for r in t.rows:
        cells = t.cells(r)
        for n, c in enumerate(t.configs[1:], start=1):
            if t.changed(r, c):
                col = len(t.group_by) + 4 * n + 1
                cells[col] = f"**{cells[col]}**"
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def metrics_markdown(metrics: dict[str, MetricsReport]) -> str:
    lines = ["### metrics", "", "| " + " | ".join(_METRIC_COLS) + " |",
             "|---|" + "---:|" * (len(_METRIC_COLS) - 1)]
    lines += ["| " + " | ".join(_metric_row(n, m)) + " |" for n, m in metrics.items()]
    return "\n".join(lines) + "\n"


def emit_report(tables: Sequence[ReportTable], metrics: dict[str, MetricsReport] | None,
                fmt: str, outdir: Path | str, stem: str = "report") -> list[Path]:
    """Write tables and metrics in one format; returns the paths written."""
    if fmt == "md":
        fmt = "markdown"
    if fmt not in FORMATS:
        raise ValueError(f"unknown format {fmt!r}; choose from {FORMATS}")
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    metrics = metrics or {}
    paths = []
    if fmt == "csv":
        for t in tables:
            p = outdir / f"{stem}_{t.title or 'table'}.csv"
            p.write_text(table_csv(t))
            paths.append(p)
        if metrics:
            buf = io.StringIO()
            w = csv.writer(buf, lineterminator="\n")
            w.writerow(_METRIC_COLS)
            for n, m in metrics.items():
                w.writerow(_metric_row(n, m))
            p = outdir / f"{stem}_metrics.csv"
            p.write_text(buf.getvalue())
            paths.append(p)
    elif fmt == "markdown":
        parts = [table_markdown(t) for t in tables]
        if metrics:
            parts.append(metrics_markdown(metrics))
        p = outdir / f"{stem}.md"
        p.write_text("\n".join(parts))
        paths.append(p)
    else:
        p = outdir / f"{stem}.json"
        doc = {"tables": [t.to_json() for t in tables],
               "metrics": {n: m.to_json() for n, m in metrics.items()}}
        p.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        paths.append(p)
    return paths


def read_report(path: Path | str) -> tuple[list[ReportTable], dict[str, MetricsReport]]:
    doc = json.loads(Path(path).read_text())
    return ([ReportTable.from_json(t) for t in doc["tables"]],
            {n: MetricsReport(**m) for n, m in doc["metrics"].items()})


def write_records(records: Iterable[EvalRecord], path: Path | str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json(), sort_keys=True) + "\n")
    return path


def read_records(path: Path | str) -> list[EvalRecord]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"{path} not found; run `binflow evaluate CORPUS` first")
    with path.open() as fh:
        return [EvalRecord.from_json(json.loads(line)) for line in fh if line.strip()]
