import csv
import io

from types import SimpleNamespace

import pytest

from jssff import report
from jssff.metrics import REPORT_COLUMNS, EvalReport
from jssff.plotting import compare_chart, training_curve
from jssff.report import ReportRow


def _rep(*vals):
    return EvalReport(*vals)


def _rows():
    return [
        ReportRow("Original / Single", "single", "none", _rep(0.5, 0.4, 0.3, 0.2, 0.25, 0.45, 0.9), strategy="cbbs"),
        ReportRow("Original⊗Laplacian / Single", "single", "laplacian",
                  _rep(0.6, 0.4, 0.35, 0.25, 0.3, 0.5, 1.1), strategy="cbbs"),
        ReportRow("Original⊗Laplacian / Early", "early", "laplacian",
                  _rep(0.7, 0.5, 0.35, 0.3, 0.3, 0.55, 1.4), strategy="cbbs"),
        ReportRow("Original⊗Laplacian / Late", "late", "laplacian",
                  _rep(0.65, 0.45, 0.33, 0.28, 0.29, 0.52, 1.2), strategy="cbbs"),
        ReportRow("Original⊗Original / Early", "early", "none", error="early fusion needs an edge detector"),
    ]


def _table_cells(md):
    lines = [ln for ln in md.splitlines() if ln.startswith("| ")][1:]
    return [[c.strip() for c in ln.strip("|").split("|")] for ln in lines]


def test_csv_layout_and_values():
    rows = _rows()
    text = report.to_csv(rows)
    parsed = list(csv.reader(io.StringIO(text)))
    assert parsed[0] == ["label", "variant", "edge", "strategy", *REPORT_COLUMNS, "status"]
    assert len(parsed) == 6
    assert [float(x) for x in parsed[3][4:11]] == list(rows[2].report.values())
    assert parsed[3][-1] == "ok"
    assert parsed[5][-1].startswith("FAILED: ") and parsed[5][4:11] == [""] * 7


def test_markdown_bold_marks_column_maxima():
    rows = _rows()
    cells = _table_cells(report.to_markdown(rows, "t"))
    assert len(cells) == 5
    for col in range(1, 8):
        bold = [r[col] for r in cells if r[col].startswith("**")]
        vals = [getattr(r.report, f) for r in rows if r.ok for f in [report.REPORT_FIELDS[col - 1]]]
        n_ties = vals.count(max(vals))
        assert len(bold) == n_ties >= 1
    # BLEU-3 has a two-way tie at 0.35, METEOR too at 0.30
    assert sum(r[3].startswith("**") for r in cells) == 2
    assert cells[4][1] == "FAILED"


def test_markdown_notes_and_failures():
    md = report.to_markdown(_rows(), "title", notes=["n1"])
    assert md.startswith("# title\n")
    assert "- FAILED Original⊗Original / Early: early fusion needs an edge detector" in md
    assert md.rstrip().endswith("- n1")
    assert "\u2014" not in md


def test_range_and_ordering_note():
    rows = _rows()
    assert all(report.in_range(r.report) for r in rows if r.ok)
    assert not report.in_range(_rep(1.2, 0, 0, 0, 0, 0, 0))
    assert not report.in_range(_rep(0, 0, 0, 0, 0, 0, -0.1))
    note = report.fusion_ordering_note(rows)
    assert "early > late > single holds" in note
    rows[3] = ReportRow("late", "late", "laplacian", _rep(0.65, 0.45, 0.33, 0.35, 0.29, 0.52, 1.2))
    assert "does not hold" in report.fusion_ordering_note(rows)
    assert report.fusion_ordering_note(rows[:2]) is None


def test_all_failed_table():
    rows = [ReportRow("x", "early", "none", error="boom")]
    assert report.column_maxima(rows)["bleu1"] is None
    assert "FAILED" in report.to_markdown(rows)


class _Log:
    def __init__(self):
        self.initial_loss, self.initial_accuracy = 3.0, 0.1
        self.epochs = [SimpleNamespace(epoch=e, loss=3.0 / (e + 1), token_accuracy=min(1.0, 0.2 * e))
                       for e in range(1, 6)]


@pytest.mark.parametrize("with_rows", [True, False])
def test_plots_are_deterministic_pngs(tmp_path, with_rows):
    rows = _rows() if with_rows else _rows()[-1:]
    compare_chart(rows, tmp_path / "a.png", "t")
    compare_chart(rows, tmp_path / "b.png", "t")
    a = (tmp_path / "a.png").read_bytes()
    assert a[:8] == b"\x89PNG\r\n\x1a\n" and a == (tmp_path / "b.png").read_bytes()
    training_curve(_Log(), tmp_path / "c.png", "curve")
    assert (tmp_path / "c.png").read_bytes()[:4] == b"\x89PNG"
