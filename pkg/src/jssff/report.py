"""Result tables: CSV and markdown rendering of per-configuration metrics."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

from .metrics import REPORT_COLUMNS, REPORT_FIELDS, EvalReport

# legal value range per metric column
METRIC_RANGES = {f: (0.0, 10.0 if f == "cider" else 1.0) for f in REPORT_FIELDS}

REFERENCE_NOTE = (
    "Reference point, not comparable: the published Original⊗Laplacian early-fusion model "
    "reports BLEU-1 0.8402 on SYDNEY with a pretrained backbone and real imagery; rows above "
    "come from a desk-scale model trained on the corpus given here."
)


@dataclass
class ReportRow:
    label: str
    variant: str
    edge: str
    report: EvalReport | None = None
    error: str | None = None
    strategy: str = ""

    @property
    def ok(self) -> bool:
        return self.report is not None and self.error is None


def column_maxima(rows) -> dict:
    """Per metric field, the maximum over successful rows (None if there are none)."""
    out = {}
    for f in REPORT_FIELDS:
        vals = [getattr(r.report, f) for r in rows if r.ok]
        out[f] = max(vals) if vals else None
    return out


def in_range(report: EvalReport) -> bool:
    return all(lo <= getattr(report, f) <= hi for f, (lo, hi) in METRIC_RANGES.items())


def to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["label", "variant", "edge", "strategy", *REPORT_COLUMNS, "status"])
    for r in rows:
        if r.ok:
            vals = [repr(float(v)) for v in r.report.values()]
            status = "ok"
        else:
            vals = [""] * len(REPORT_COLUMNS)
            status = f"FAILED: {r.error}"
        w.writerow([r.label, r.variant, r.edge, r.strategy, *vals, status])
    return buf.getvalue()


def to_markdown(rows, title: str = "", notes=()) -> str:
    """Aligned markdown table; per-column maxima in bold (all tied cells)."""
    best = column_maxima(rows)
    header = ["Configuration", *REPORT_COLUMNS]
    body = []
    for r in rows:
        label = f"{r.label} [{r.strategy}]" if r.strategy else r.label
        if not r.ok:
            body.append([label] + ["FAILED"] + [""] * (len(REPORT_COLUMNS) - 1))
            continue
        cells = []
        for f in REPORT_FIELDS:
            v = getattr(r.report, f)
            s = f"{v:.4f}"
            cells.append(f"**{s}**" if best[f] is not None and v == best[f] else s)
        body.append([label] + cells)
    widths = [max(len(row[k]) for row in [header] + body) for k in range(len(header))]

    def line(cells):
        return "| " + " | ".join(c.ljust(w) for c, w in zip(cells, widths)) + " |"

    out = []
    if title:
        out += [f"# {title}", ""]
    out.append(line(header))
    out.append("|" + "|".join("-" * (w + 2) for w in widths) + "|")
    out += [line(row) for row in body]
    failures = [r for r in rows if not r.ok]
    if failures or notes:
        out.append("")
    for r in failures:
        out.append(f"- FAILED {r.label}: {r.error}")
    for n in notes:
        out.append(f"- {n}")
    return "\n".join(out) + "\n"


def fusion_ordering_note(rows) -> str | None:
    """Describe whether early > late > single holds on BLEU-4 among successful rows."""
    by_variant = {}
    for r in rows:
        if r.ok and r.edge != "none":
            by_variant.setdefault(r.variant, r.report.bleu4)
    if not all(v in by_variant for v in ("single", "early", "late")):
        return None
    e, l, s = by_variant["early"], by_variant["late"], by_variant["single"]
    holds = e > l > s
    return (f"Fusion ordering on BLEU-4 (informational): early {e:.4f}, late {l:.4f}, single {s:.4f}; "
            f"early > late > single {'holds' if holds else 'does not hold'} on this run.")
