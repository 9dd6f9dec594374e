"""Learning-curve SVGs from metrics CSV files, one file per metric."""

import csv
import math
from pathlib import Path
from xml.sax.saxutils import escape

WIDTH, HEIGHT = 640, 400
MARGIN = dict(left=70, right=160, top=30, bottom=50)
COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf")


class MetricsFormatError(ValueError):
    pass


def read_metrics(path):
    """Parse a metrics CSV into (header, rows of floats); rows keep file order."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise MetricsFormatError(f"{path}:1: missing header") from None
        if not header or header[0] != "env_step":
            raise MetricsFormatError(f"{path}:1: first column must be env_step")
        rows = []
        for row in reader:
            lineno = reader.line_num
            if not row:
                continue
            if len(row) != len(header):
                raise MetricsFormatError(
                    f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}"
                )
            try:
                rows.append([float(v) for v in row])
            except ValueError as e:
                raise MetricsFormatError(f"{path}:{lineno}: {e}") from None
    return header, rows


def series_label(path):
    path = Path(path)
    return path.parent.name if path.stem == "metrics" and path.parent.name else path.stem


def _ticks(lo, hi, n=5):
    if hi == lo:
        return [lo]
    return [lo + (hi - lo) * i / (n - 1) for i in range(n)]


def _fmt(v):
    return f"{v:.3g}"


def render_svg(metric, series):
    """SVG text for one metric; ``series`` is a list of (label, xs, ys)."""
    x0, y0 = MARGIN["left"], MARGIN["top"]
    pw = WIDTH - MARGIN["left"] - MARGIN["right"]
    ph = HEIGHT - MARGIN["top"] - MARGIN["bottom"]
    finite = [(x, y) for _, xs, ys in series for x, y in zip(xs, ys) if math.isfinite(y)]
    if finite:
        xlo, xhi = min(p[0] for p in finite), max(p[0] for p in finite)
        ylo, yhi = min(p[1] for p in finite), max(p[1] for p in finite)
    else:
        xlo, xhi, ylo, yhi = 0.0, 1.0, 0.0, 1.0
    if xhi == xlo:
        xhi = xlo + 1.0
    if yhi == ylo:
        ylo, yhi = ylo - 0.5, yhi + 0.5

    def sx(x):
        return x0 + (x - xlo) / (xhi - xlo) * pw

    def sy(y):
        return y0 + ph - (y - ylo) / (yhi - ylo) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{x0 + pw / 2:.1f}" y="18" text-anchor="middle" font-size="14">{escape(metric)}</text>',
        f'<g class="axes" stroke="black">'
        f'<line x1="{x0}" y1="{y0 + ph}" x2="{x0 + pw}" y2="{y0 + ph}"/>'
        f'<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y0 + ph}"/></g>',
    ]
    for t in _ticks(xlo, xhi):
        out.append(
            f'<text x="{sx(t):.1f}" y="{y0 + ph + 16}" text-anchor="middle" font-size="10">{_fmt(t)}</text>'
        )
    for t in _ticks(ylo, yhi):
        out.append(
            f'<text x="{x0 - 6}" y="{sy(t) + 3:.1f}" text-anchor="end" font-size="10">{_fmt(t)}</text>'
        )
    out.append(
        f'<text x="{x0 + pw / 2:.1f}" y="{HEIGHT - 12}" text-anchor="middle" font-size="12">env_step</text>'
    )
    for i, (label, xs, ys) in enumerate(series):
        color = COLORS[i % len(COLORS)]
        pts = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in zip(xs, ys) if math.isfinite(y))
        if pts:
            out.append(
                f'<polyline class="series" data-label="{escape(label)}" fill="none" '
                f'stroke="{color}" stroke-width="1.5" points="{pts}"/>'
            )
        ly = y0 + 14 + 18 * i
        lx = x0 + pw + 12
        out.append(
            f'<g class="legend"><line x1="{lx}" y1="{ly - 4}" x2="{lx + 20}" y2="{ly - 4}" '
            f'stroke="{color}" stroke-width="2"/>'
            f'<text x="{lx + 26}" y="{ly}" font-size="11">{escape(label)}</text></g>'
        )
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_plots(csv_paths, out_dir, labels=None):
    """Write ``<metric>.svg`` for every metric column; returns the written paths.

    Several CSVs overlay as labeled series. Labels default to the file stem,
    or the parent directory name for files called ``metrics.csv``.
    """
    if isinstance(csv_paths, (str, Path)):
        csv_paths = [csv_paths]
    if not csv_paths:
        raise ValueError("need at least one metrics CSV")
    labels = list(labels) if labels is not None else [series_label(p) for p in csv_paths]
    tables = [read_metrics(p) for p in csv_paths]
    metrics = []
    for header, _ in tables:
        metrics.extend(m for m in header[1:] if m not in metrics)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for metric in metrics:
        series = []
        for label, (header, rows) in zip(labels, tables):
            if metric not in header:
                continue
            j = header.index(metric)
            series.append((label, [r[0] for r in rows], [r[j] for r in rows]))
        path = out_dir / f"{metric}.svg"
        path.write_text(render_svg(metric, series), encoding="utf-8")
        written.append(path)
    return written
