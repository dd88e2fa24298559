"""Gate-trace visualization: per-family survival heatmaps over training
plus a final-snapshot barcode, emitted as plain SVG text."""

from __future__ import annotations

import csv
from dataclasses import dataclass

from .gates import FAMILIES
from .io import atomic_write_text


class TraceFormatError(ValueError):
    pass


@dataclass
class TraceRow:
    step: int
    layer: int
    family: str
    index: str
    probability: float
    tau: float
    cost_fraction: float


def read_trace(path: str) -> list[TraceRow]:
    rows = []
    try:
        with open(path, newline="") as f:
            reader = csv.DictReader(f)
            if reader.fieldnames is None:
                raise TraceFormatError(f"{path}: empty trace file")
            for lineno, rec in enumerate(reader, start=2):
                try:
                    row = TraceRow(
                        step=int(rec["step"]), layer=int(rec["layer"]),
                        family=rec["family"], index=rec["index"],
                        probability=float(rec["probability"]),
                        tau=float(rec["tau"]),
                        cost_fraction=float(rec["cost_fraction"]),
                    )
                except (KeyError, TypeError, ValueError) as exc:
                    raise TraceFormatError(
                        f"{path}: malformed trace row at line {lineno}: {exc}"
                    ) from exc
                if row.family not in FAMILIES:
                    raise TraceFormatError(
                        f"{path}: unknown gate family {row.family!r} at line {lineno}")
                rows.append(row)
    except OSError as exc:
        raise TraceFormatError(f"cannot read trace {path}: {exc}") from exc
    if not rows:
        raise TraceFormatError(f"{path}: trace contains no records")
    return rows


def _shade(fraction: float) -> str:
    """White at 0 survival to dark navy at full survival."""
    f = min(max(fraction, 0.0), 1.0)
    r = round(255 - f * 220)
    g = round(255 - f * 210)
    b = round(255 - f * 140)
    return f"rgb({r},{g},{b})"


def _rect(x, y, w, h, fill) -> str:
    return (f'<rect x="{x:.1f}" y="{y:.1f}" width="{w:.2f}" height="{h:.2f}" '
            f'fill="{fill}"/>')


def _text(x, y, s, size=11, anchor="start") -> str:
    return (f'<text x="{x:.1f}" y="{y:.1f}" font-family="monospace" '
            f'font-size="{size}" text-anchor="{anchor}">{s}</text>')


def render_trace_svg(rows: list[TraceRow], out_path: str) -> None:
    """Heatmap panels (rows = layers, columns = trace snapshots, shade =
    surviving fraction per family) and a final-snapshot barcode strip."""
    steps = sorted({r.step for r in rows})
    layers = sorted({r.layer for r in rows})
    col_of = {s: i for i, s in enumerate(steps)}
    row_of = {l: i for i, l in enumerate(layers)}

    # survival fraction per (family, layer, step): share of gates above 0.5
    alive: dict = {}
    totals: dict = {}
    for r in rows:
        key = (r.family, r.layer, r.step)
        alive[key] = alive.get(key, 0) + (1 if r.probability > 0.5 else 0)
        totals[key] = totals.get(key, 0) + 1

    cell_w, cell_h = 10.0, 12.0
    margin, label_w, title_h, gap = 12.0, 64.0, 18.0, 16.0
    panel_w = label_w + len(steps) * cell_w
    panel_h = title_h + len(layers) * cell_h

    parts = []
    y0 = margin
    for family in FAMILIES:
        parts.append(_text(margin, y0 + 12, f"{family} gates (share surviving)"))
        for l in layers:
            parts.append(_text(margin, y0 + title_h + row_of[l] * cell_h + 9,
                               f"L{l}", size=9))
            for s in steps:
                tot = totals.get((family, l, s), 0)
                frac = alive.get((family, l, s), 0) / tot if tot else 0.0
                parts.append(_rect(margin + label_w + col_of[s] * cell_w,
                                   y0 + title_h + row_of[l] * cell_h,
                                   cell_w - 1, cell_h - 1, _shade(frac)))
        y0 += panel_h + gap

    # barcode: every individual gate's final binary state
    final_step = steps[-1]
    final = [r for r in rows if r.step == final_step]
    parts.append(_text(margin, y0 + 12, f"final snapshot (step {final_step}) barcode"))
    y0 += title_h
    bar_w = panel_w
    for family in FAMILIES:
        fam = sorted((r for r in final if r.family == family),
                     key=lambda r: (r.layer, r.index))
        per_layer: dict[int, list[TraceRow]] = {}
        for r in fam:
            per_layer.setdefault(r.layer, []).append(r)
        parts.append(_text(margin, y0 + 8, family, size=9))
        for l in layers:
            units = per_layer.get(l, [])
            if not units:
                continue
            w = max((bar_w - label_w) / len(units), 0.5)
            for i, r in enumerate(units):
                fill = _shade(1.0) if r.probability > 0.5 else _shade(0.0)
                parts.append(_rect(margin + label_w + i * w,
                                   y0 + row_of[l] * 6.0, max(w - 0.3, 0.3), 5.0, fill))
        y0 += len(layers) * 6.0 + 14.0

    width = margin * 2 + panel_w
    height = y0 + margin
    svg = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0f}" '
           f'height="{height:.0f}" viewBox="0 0 {width:.0f} {height:.0f}">\n'
           f'<rect width="100%" height="100%" fill="white"/>\n'
           + "\n".join(parts) + "\n</svg>\n")
    atomic_write_text(out_path, svg)
