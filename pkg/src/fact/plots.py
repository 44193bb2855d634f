"""Rank curves from metrics records: CSV tables and small SVG line plots."""
from __future__ import annotations

import csv
from pathlib import Path
from xml.sax.saxutils import escape

_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e")


class MetricsFormatError(ValueError):
    pass


def rank_points(records):
    """Per ``(format, rank)``: best val accuracy and the parameter count.

    Uses ``cell`` records (sweeps) and ``run`` records (single training runs).
    """
    acc, params = {}, {}
    for rec in records:
        if rec.get("record") not in ("cell", "run"):
            continue
        try:
            key = (str(rec["format"]), int(rec["rank"]))
            count = int(rec["params"])
        except (KeyError, TypeError, ValueError) as exc:
            raise MetricsFormatError(f"malformed {rec.get('record')} record: {rec}") from exc
        params[key] = count
        if rec.get("val_acc") is not None:
            acc[key] = max(acc.get(key, float("-inf")), float(rec["val_acc"]))
    return acc, params


def _series(points):
    out = {}
    for (fmt, rank), value in sorted(points.items()):
        out.setdefault(fmt, []).append((rank, value))
    return out


def write_csv(path, points, value_name):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["format", "rank", value_name])
        for (fmt, rank), value in sorted(points.items()):
            w.writerow([fmt, rank, value])


def svg_lines(series, title, xlabel, ylabel, width=480, height=320):
    """Minimal line chart: one polyline per series, linear axes."""
    pad = 50
    xs = [x for pts in series.values() for x, _ in pts]
    ys = [y for pts in series.values() for _, y in pts]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    if x1 == x0:
        x0, x1 = x0 - 1, x1 + 1
    if y1 == y0:
        y0, y1 = y0 - 1, y1 + 1

    def px(x):
        return pad + (x - x0) / (x1 - x0) * (width - 2 * pad)

    def py(y):
        return height - pad - (y - y0) / (y1 - y0) * (height - 2 * pad)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<text x="{width / 2}" y="20" text-anchor="middle">{escape(title)}</text>',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
        f'<text x="{width / 2}" y="{height - 10}" text-anchor="middle">{escape(xlabel)}</text>',
        f'<text x="15" y="{height / 2}" transform="rotate(-90 15 {height / 2})" '
        f'text-anchor="middle">{escape(ylabel)}</text>',
        f'<text x="{pad}" y="{height - pad + 15}" text-anchor="middle">{x0:g}</text>',
        f'<text x="{width - pad}" y="{height - pad + 15}" text-anchor="middle">{x1:g}</text>',
        f'<text x="{pad - 5}" y="{height - pad}" text-anchor="end">{y0:g}</text>',
        f'<text x="{pad - 5}" y="{pad}" text-anchor="end">{y1:g}</text>',
    ]
    for i, (name, pts) in enumerate(sorted(series.items())):
        color = _COLORS[i % len(_COLORS)]
        coords = " ".join(f"{px(x):.1f},{py(y):.1f}" for x, y in pts)
        parts.append(f'<polyline fill="none" stroke="{color}" points="{coords}"/>')
        parts.extend(f'<circle cx="{px(x):.1f}" cy="{py(y):.1f}" r="3" fill="{color}"/>' for x, y in pts)
        parts.append(f'<text x="{width - pad + 5}" y="{pad + 15 * i}" fill="{color}">{escape(name)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def export_plots(records, out_dir):
    """Write the two CSV tables and SVGs; returns the written paths."""
    acc, params = rank_points(records)
    if not params:
        raise MetricsFormatError("no cell or run records with format/rank/params")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    write_csv(out / "params_vs_rank.csv", params, "params")
    (out / "params_vs_rank.svg").write_text(
        svg_lines(_series(params), "Trainable parameters vs rank", "rank", "params"))
    written += [out / "params_vs_rank.csv", out / "params_vs_rank.svg"]
    write_csv(out / "accuracy_vs_rank.csv", acc, "val_acc")
    written.append(out / "accuracy_vs_rank.csv")
    if acc:
        (out / "accuracy_vs_rank.svg").write_text(
            svg_lines(_series(acc), "Validation accuracy vs rank", "rank", "val acc"))
        written.append(out / "accuracy_vs_rank.svg")
    return written
