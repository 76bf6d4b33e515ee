import json

import pytest

from binflow.cli import main
from binflow.fixtures import LISTINGS


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    assert main(["generate", str(out), "--filter", "origin=Foreign", "--filter", "elem_size=4",
                 "--filter", "length=2", "--oracle"]) == 0
    return out


def test_generate_writes_cases(corpus):
    entries = [json.loads(line) for line in (corpus / "manifest.jsonl").read_text().splitlines()]
    assert entries
    case = corpus / entries[0]["case"]
    assert (case / "test.s").exists()
    assert "oracle_truth" in json.loads((case / "truth.json").read_text())


def test_run_dynamic_and_static(corpus, capsys):
    assert main(["run-dynamic", str(corpus)]) == 0
    assert "cases:" in capsys.readouterr().out
    case = sorted(p for p in corpus.iterdir() if p.is_dir())[0]
    assert (case / "dynamic_dfg.json").exists() and (case / "oracle.json").exists()
    assert main(["analyze-static", "--preset", "angr-cf", str(case)]) == 0
    assert (case / "static_angr_CF.json").exists()
    assert main(["analyze-static", "--c1", "--c2", str(corpus)]) == 0
    assert (case / "static_angr_C.json").exists()


def test_evaluate_is_deterministic(corpus, tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["evaluate", str(corpus), "--reports", str(a)]) == 0
    assert main(["evaluate", str(corpus), "--reports", str(b), "--jobs", "2"]) == 0
    assert (a / "report.md").read_text() == (b / "report.md").read_text()
    assert main(["report", "--format", "json", "--reports", str(a)]) == 0
    doc = json.loads((a / "report.json").read_text())
    assert doc["tables"][0]["title"] == "by_alias_class"
    assert main(["report", "--format", "csv", "--reports", str(a)]) == 0
    assert (a / "report_by_alias_class.csv").exists()


def test_single_source_file(tmp_path, capsys):
    src = tmp_path / "t.s"
    src.write_text(LISTINGS["unconditional"])
    assert main(["run-dynamic", str(src), "--reg", "rdi=0x7ffe0000", "--reg", "rdx=1"]) == 0
    events = [json.loads(line) for line in capsys.readouterr().out.splitlines()]
    assert sum(e["channel"] == "mem" for e in events) == 3  # store, load, ret
    assert main(["run-dynamic", str(src), "--reg", "rdi=0x10", "--reg", "rdx=1"]) == 1
    assert "outside declared regions" in capsys.readouterr().err
    assert main(["analyze-static", str(src), "--f"]) == 0
    g = json.loads(capsys.readouterr().out)
    assert {"src": 0x1000, "dst": 0x1001, "channel": "mem", "scope": "Intra"} in g["edges"]


def test_fixtures_command(capsys):
    assert main(["fixtures", "--preset", "angr-cf"]) == 0
    out = capsys.readouterr().out
    assert "3/3 fixtures pass" in out
    assert main(["fixtures", "--preset", "baseline"]) == 0


def test_missing_corpus_is_actionable(tmp_path, capsys):
    assert main(["evaluate", str(tmp_path / "nope")]) == 2
    assert "binflow generate" in capsys.readouterr().err
    assert main(["report", "--reports", str(tmp_path / "nope")]) == 2
    assert "binflow evaluate" in capsys.readouterr().err
