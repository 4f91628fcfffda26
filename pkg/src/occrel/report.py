"""CSV and static SVG emitters for metric reports."""
from __future__ import annotations

import csv
import math
from pathlib import Path
from typing import List, Optional

from .metrics import BinStats, MetricReport, RejectionCurve, ViewReport

DIAGRAM_HEADER = ("bin_index", "count", "mean_conf", "mean_acc")
CURVE_HEADER = ("rejection_rate", "normalized_error")

W, H, PAD = 420, 420, 50


def num(x) -> str:
    """Shortest decimal that round-trips to the same float."""
    return repr(float(x))


def _write_rows(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def write_metrics_csv(report: MetricReport, path) -> None:
    _write_rows(path, ("name", "value"), [(k, num(v)) for k, v in report.as_rows()])


def read_metrics_csv(path) -> dict:
    with open(path, newline="") as fh:
        return {row["name"]: float(row["value"]) for row in csv.DictReader(fh)}


def write_diagram_csv(bins: List[BinStats], path) -> None:
    _write_rows(path, DIAGRAM_HEADER,
                [(b.bin_index, b.count, num(b.mean_conf), num(b.mean_acc)) for b in bins])


def read_diagram_csv(path) -> List[BinStats]:
    with open(path, newline="") as fh:
        return [BinStats(int(r["bin_index"]), int(r["count"]), float(r["mean_conf"]),
                         float(r["mean_acc"])) for r in csv.DictReader(fh)]


def write_curve_csv(curve: Optional[RejectionCurve], path) -> None:
    rows = [] if curve is None else [(num(r), num(e)) for r, e in zip(curve.rates, curve.errors)]
    _write_rows(path, CURVE_HEADER, rows)


# -- SVG ---------------------------------------------------------------------

def _px(x: float, y: float):
    return PAD + x * (W - 2 * PAD), H - PAD - y * (H - 2 * PAD)


def _frame(title: str, xlabel: str, ylabel: str) -> List[str]:
    x0, y0 = _px(0, 0)
    x1, y1 = _px(1, 1)
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
        f'<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>',
        f'<text x="{W / 2:.1f}" y="24" text-anchor="middle" font-family="sans-serif" font-size="14">{title}</text>',
        f'<rect x="{x0:.2f}" y="{y1:.2f}" width="{x1 - x0:.2f}" height="{y0 - y1:.2f}" fill="none" stroke="black"/>',
        f'<text x="{W / 2:.1f}" y="{H - 12}" text-anchor="middle" font-family="sans-serif" font-size="12">{xlabel}</text>',
        f'<text x="14" y="{H / 2:.1f}" text-anchor="middle" font-family="sans-serif" font-size="12" '
        f'transform="rotate(-90 14 {H / 2:.1f})">{ylabel}</text>',
    ]
    for t in (0.0, 0.25, 0.5, 0.75, 1.0):
        tx, ty = _px(t, 0)
        out.append(f'<text x="{tx:.2f}" y="{ty + 14:.2f}" text-anchor="middle" font-family="sans-serif" font-size="10">{t:g}</text>')
        lx, ly = _px(0, t)
        out.append(f'<text x="{lx - 6:.2f}" y="{ly + 3:.2f}" text-anchor="end" font-family="sans-serif" font-size="10">{t:g}</text>')
    return out


def reliability_svg(bins: List[BinStats], title: str) -> str:
    """Per-bin accuracy bars against the identity diagonal, gap shaded."""
    m = len(bins)
    out = _frame(title, "confidence", "accuracy")
    for b in bins:
        if not b.count:
            continue
        lo, hi = b.bin_index / m, (b.bin_index + 1) / m
        xa, ya = _px(lo, b.mean_acc)
        xb, y0 = _px(hi, 0)
        out.append(f'<rect class="acc" x="{xa:.2f}" y="{ya:.2f}" width="{xb - xa:.2f}" height="{y0 - ya:.2f}" '
                   f'fill="#3b6fb6" stroke="#1d3c66" data-bin="{b.bin_index}" data-acc="{num(b.mean_acc)}"/>')
        top, bot = max(b.mean_acc, b.mean_conf), min(b.mean_acc, b.mean_conf)
        _, yt = _px(lo, top)
        _, yb = _px(lo, bot)
        gap = abs(b.mean_acc - b.mean_conf)
        out.append(f'<rect class="gap" x="{xa:.2f}" y="{yt:.2f}" width="{xb - xa:.2f}" height="{yb - yt:.2f}" '
                   f'fill="#d9534f" fill-opacity="0.45" data-bin="{b.bin_index}" data-conf="{num(b.mean_conf)}" '
                   f'data-gap="{num(gap)}"/>')
    x0, y0 = _px(0, 0)
    x1, y1 = _px(1, 1)
    out.append(f'<line class="identity" x1="{x0:.2f}" y1="{y0:.2f}" x2="{x1:.2f}" y2="{y1:.2f}" '
               f'stroke="gray" stroke-dasharray="4 3"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _polyline(xs, ys, cls, color) -> str:
    pts = " ".join("{:.2f},{:.2f}".format(*_px(x, y)) for x, y in zip(xs, ys))
    return f'<polyline class="{cls}" points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>'


def rejection_svg(view: ViewReport, title: str) -> str:
    out = _frame(title, "rejection rate", "normalized error")
    out.append(_polyline([0, 1], [1, 0], "random", "gray"))
    curve = view.curve
    if curve is None:
        out.append(f'<text x="{W / 2:.1f}" y="{H / 2:.1f}" text-anchor="middle" font-family="sans-serif" '
                   f'font-size="12">undefined: {view.prr_error}</text>')
    else:
        e0 = view.error_rate
        out.append(_polyline([0, e0, 1], [1, 0, 0], "oracle", "#2e8b57"))
        out.append(_polyline(curve.rates, curve.errors, "model", "#3b6fb6"))
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _fmt_metric(x) -> str:
    return "undefined" if x is None or (isinstance(x, float) and math.isnan(x)) else f"{100 * x:.2f}%"


def emit_reports(report: MetricReport, out_dir) -> List[Path]:
    """Write metrics.csv plus diagram/curve CSV and SVG for both views."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    p = out / "metrics.csv"
    write_metrics_csv(report, p)
    written.append(p)
    for tag, view in (("sem", report.sem), ("geo", report.geo)):
        p = out / f"reliability_{tag}.csv"
        write_diagram_csv(view.diagram, p)
        written.append(p)
        p = out / f"reliability_{tag}.svg"
        p.write_text(reliability_svg(view.diagram, f"Reliability ({tag}) ECE {_fmt_metric(view.ece)}"))
        written.append(p)
        p = out / f"rejection_{tag}.csv"
        write_curve_csv(view.curve, p)
        written.append(p)
        p = out / f"rejection_{tag}.svg"
        p.write_text(rejection_svg(view, f"Rejection ({tag}) PRR {_fmt_metric(view.prr)}"))
        written.append(p)
    return written


def format_table(rows, title: Optional[str] = None) -> str:
    """Plain-text metric table; ``rows`` is a list of (label, MetricReport)."""
    cols = ("miou", "prr_sem", "ece_sem", "iou", "prr_geo", "ece_geo")
    lines = [] if title is None else [title]
    lines.append(f"{'method':<22}" + "".join(f"{c:>10}" for c in cols))
    for label, r in rows:
        vals = [r.miou, r.prr_sem, r.ece_sem, r.iou, r.prr_geo, r.ece_geo]
        cells = "".join(f"{'-':>10}" if v is None else f"{100 * v:>10.2f}" for v in vals)
        lines.append(f"{label:<22}{cells}")
    return "\n".join(lines)
