"""Plain-text report rendering for evaluation results.

All numeric formatting rules live here so reports stay regenerable from raw
records: pass rates fixed at two decimals, containment cells as "count (pct%)"
with one decimal, count-comparison rows with trailing zeros trimmed.
"""

from __future__ import annotations

from .metrics import (
    CountComparisonReport,
    IntersectionReport,
    LengthSummary,
    PassAtK,
    RecallReport,
)


def _table(headers, rows, marks=None) -> str:
    """Fixed-width text table. `marks` is an optional set of (row, col)
    cell coordinates to flag with a trailing asterisk."""
    cells = [list(headers)] + [list(r) for r in rows]
    if marks:
        for (ri, ci) in marks:
            cells[ri + 1][ci] = f"{cells[ri + 1][ci]}*"
    widths = [max(len(str(row[i])) for row in cells) for i in range(len(headers))]
    lines = []
    for n, row in enumerate(cells):
        line = "  ".join(str(v).ljust(widths[i]) for i, v in enumerate(row)).rstrip()
        lines.append(line)
        if n == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)


def pct2(value: float) -> str:
    """Rate in [0, 1] rendered as a fixed two-decimal percentage."""
    return f"{100.0 * value:.2f}"


def containment_cell(count: int, pct: float) -> str:
    return f"{count} ({pct:.1f}%)"


# ── pass rate tables ─────────────────────────────────────────────────────────

def render_pass_table(summary: dict, ks=(1, 3, 5), method: str = "estimator") -> str:
    """summary: condition -> {k: PassAtK}. Rows sorted by condition name with
    AllianceCoder last, mirroring an approaches-after-baselines layout."""
    names = sorted(summary, key=lambda n: (n == "AllianceCoder", n))
    headers = ["Condition"] + [f"Pass@{k}" for k in ks]
    rows = []
    for name in names:
        row = [name]
        for k in ks:
            p = summary[name].get(k)
            row.append(p.as_percent_str() if p is not None else "-")
        rows.append(row)
    title = f"Pass@k ({method}, percent)"
    return f"{title}\n{_table(headers, rows)}"


def render_comparison(labeled: list, ks=(1, 3, 5)) -> str:
    """labeled: [(label, {k: PassAtK})]. Best value per column marked '*'."""
    headers = ["Run"] + [f"Pass@{k}" for k in ks]
    rows = []
    marks = set()
    for ci, k in enumerate(ks, start=1):
        best = None
        best_ri = None
        for ri, (_label, per_k) in enumerate(labeled):
            p = per_k.get(k)
            if p is not None and (best is None or p.value > best):
                best, best_ri = p.value, ri
        if best_ri is not None:
            marks.add((best_ri, ci))
    for label, per_k in labeled:
        row = [label]
        for k in ks:
            p = per_k.get(k)
            row.append(p.as_percent_str() if p is not None else "-")
        rows.append(row)
    return f"Pass@k comparison (percent, best per column marked *)\n{_table(headers, rows, marks)}"


# ── retrieval analyses ───────────────────────────────────────────────────────

def render_recall_report(report: RecallReport, label: str = "") -> str:
    row = " / ".join(pct2(v) for v in (report.recall, report.brecall, report.crecall))
    head = f"API recall ratios{f' ({label})' if label else ''}: Recall / BRecall / CRecall"
    notes = (
        f"tasks scored: {report.scored_tasks}"
        f" (BRecall over {report.brecall_tasks};"
        f" {report.excluded_tasks} excluded, empty oracle set)"
    )
    return f"{head}\n{row}\n{notes}"


def render_count_report(report: CountComparisonReport, label: str = "") -> str:
    head = f"Retrieved API count vs actual{f' ({label})' if label else ''}: Higher / Equal / Lower"
    row = report.formatted_row()
    notes = f"tasks classified: {report.denominator}"
    if report.excluded:
        notes += f"; excluded (no oracle set): {report.excluded}"
    return f"{head}\n{row}\n{notes}"


# ── intersection and containment ─────────────────────────────────────────────

def render_intersections(report: IntersectionReport) -> str:
    lines = ["Passed-task intersections (Pass@5 sets)"]
    for name in sorted(report.pass_sets):
        ids = ", ".join(sorted(report.pass_sets[name])) or "(none)"
        lines.append(f"  {name}: {len(report.pass_sets[name])} [{ids}]")
    for combo in sorted(report.intersections, key=lambda c: (len(c), c)):
        tasks = report.intersections[combo]
        ids = ", ".join(sorted(tasks)) or "(none)"
        lines.append(f"  {' & '.join(combo)}: {len(tasks)} [{ids}]")
    return "\n".join(lines)


def render_containment_table(report: IntersectionReport) -> str:
    """CPass / BPass per containment class; cells as 'count (pct%)'."""
    headers = ["Containment", "Tasks", "CPass", "BPass"]
    rows = []
    for cls in sorted(report.containment):
        split = report.containment[cls]
        rows.append([
            cls,
            str(split.total),
            containment_cell(split.cpass, split.cpass_pct),
            containment_cell(split.bpass, split.bpass_pct),
        ])
    note = (
        f"(excluded {len(report.excluded_pure)} task(s) passed without any "
        f"repository information)"
    )
    return f"Passed test cases by containment class\n{_table(headers, rows)}\n{note}"


def render_length_report(summaries: dict) -> str:
    """summaries: partition name -> LengthSummary."""
    headers = ["Partition", "Count", "Min", "Median", "Mean", "Max"]
    rows = []
    for name in sorted(summaries):
        s: LengthSummary = summaries[name]
        if s.count == 0:
            rows.append([name, "0", "-", "-", "-", "-"])
        else:
            rows.append([
                name, str(s.count), str(s.min), f"{s.median:g}",
                f"{s.mean:.1f}", str(s.max),
            ])
    return f"Prompt token lengths by partition\n{_table(headers, rows)}"
