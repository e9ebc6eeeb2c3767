"""CSV report I/O with a JSON header line, plus a tiny SVG line plotter.

All floats are written with repr-faithful %.17g formatting so identical
runs produce byte-identical files.
"""

from __future__ import annotations

import json
import os


def fmt(x) -> str:
    if isinstance(x, float):
        return format(x, ".17g")
    return str(x)


def write_csv(path, columns: list[str], rows: list[dict], meta: dict | None = None, force: bool = False) -> None:
    if os.path.exists(path) and not force:
        raise FileExistsError(f"refusing to overwrite {path} (use --force)")
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    lines = []
    if meta is not None:
        lines.append("# " + json.dumps(meta, sort_keys=True))
    lines.append(",".join(columns))
    for row in rows:
        lines.append(",".join(fmt(row[c]) for c in columns))
    with open(path, "w", newline="\n") as f:
        f.write("\n".join(lines) + "\n")


def read_csv(path) -> tuple[dict, list[str], list[dict]]:
    with open(path) as f:
        lines = [ln.rstrip("\n") for ln in f]
    meta = {}
    start = 0
    if lines and lines[0].startswith("# "):
        meta = json.loads(lines[0][2:])
        start = 1
    columns = lines[start].split(",")
    rows = []
    for ln in lines[start + 1 :]:
        if not ln:
            continue
        vals = ln.split(",")
        row = {}
        for c, v in zip(columns, vals):
            try:
                row[c] = float(v)
            except ValueError:
                row[c] = v
        rows.append(row)
    return meta, columns, rows


def svg_line_plot(series: dict[str, list[tuple[float, float]]], path, title: str = "", width: int = 640, height: int = 360, force: bool = False) -> None:
    """Render named (x, y) series as an SVG polyline chart; pure function of its inputs."""
    if os.path.exists(path) and not force:
        raise FileExistsError(f"refusing to overwrite {path} (use --force)")
    pad = 40
    xs = [p[0] for pts in series.values() for p in pts]
    ys = [p[1] for pts in series.values() for p in pts]
    if not xs:
        xs, ys = [0.0, 1.0], [0.0, 1.0]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y1 = y0 + 1.0

    def sx(x):
        return pad + (x - x0) / (x1 - x0) * (width - 2 * pad)

    def sy(y):
        return height - pad - (y - y0) / (y1 - y0) * (height - 2 * pad)

    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width // 2}" y="20" text-anchor="middle" font-size="14">{title}</text>',
    ]
    for i, (name, pts) in enumerate(sorted(series.items())):
        color = colors[i % len(colors)]
        coords = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in pts)
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{coords}"/>')
        parts.append(f'<text x="{pad}" y="{35 + 15 * i}" font-size="11" fill="{color}">{name}</text>')
    parts.append(f'<text x="{pad}" y="{height - 8}" font-size="10">x: [{fmt(float(x0))}, {fmt(float(x1))}]  y: [{fmt(float(y0))}, {fmt(float(y1))}]</text>')
    parts.append("</svg>")
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="\n") as f:
        f.write("\n".join(parts) + "\n")
