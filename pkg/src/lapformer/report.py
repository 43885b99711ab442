"""Markdown tables of metric reports and model complexity."""

from __future__ import annotations

from typing import Sequence

from .metrics import MetricReport

DATASET_ORDER = ("Kvasir", "ClinicDB", "ColonDB", "CVC-T", "ETIS")


def _ordered(names):
    known = [d for d in DATASET_ORDER if d in names]
    return known + sorted(n for n in names if n not in DATASET_ORDER)


def metrics_table(rows: Sequence[tuple[str, Sequence[MetricReport]]]) -> str:
    """One row per method, an mDice | mIoU column pair per dataset."""
    if not rows or not any(reports for _, reports in rows):
        raise ValueError("render_report needs at least one metric report")
    datasets = _ordered({r.dataset_name for _, reports in rows for r in reports})
    head = "| Method | " + " | ".join(f"{d} mDice | {d} mIoU" for d in datasets) + " |"
    sep = "|---|" + "---|---|" * len(datasets)
    lines = [head, sep]
    for method, reports in rows:
        by_name = {r.dataset_name: r for r in reports}
        cells = []
        for d in datasets:
            r = by_name.get(d)
            cells += [f"{r.mDice:.3f}", f"{r.mIoU:.3f}"] if r else ["-", "-"]
        lines.append(f"| {method} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def complexity_table(rows: Sequence[tuple[str, int, float]]) -> str:
    lines = ["| Method | GFLOPs | Params (M) |", "|---|---|---|"]
    lines += [f"| {name} | {gflops:.2f} | {params / 1e6:.2f} |" for name, params, gflops in rows]
    return "\n".join(lines) + "\n"


def render_report(reports, flops_params: Sequence[tuple[str, int, float]] = ()) -> str:
    """``reports`` is a list of MetricReport (one method) or of
    ``(method, [MetricReport, ...])`` pairs."""
    reports = list(reports)
    if not reports:
        raise ValueError("render_report needs at least one metric report")
    if isinstance(reports[0], MetricReport):
        reports = [("LAPFormer", reports)]
    out = ["## Segmentation metrics", "", metrics_table(reports)]
    if flops_params:
        out += ["## Complexity", "", complexity_table(flops_params)]
    return "\n".join(out)
