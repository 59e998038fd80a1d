"""Minimal self-contained SVG line charts (no plotting dependency).

One polyline per series, auto-scaled axes, a small legend.  Output is plain
well-formed XML, stable across runs for identical data.
"""

from __future__ import annotations

import math
from pathlib import Path
from xml.sax.saxutils import escape

__all__ = ["render_line_chart"]

_COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]
_W, _H = 640, 400
_MARGIN = 56


def _scale(vals, lo_pix, hi_pix):
    lo, hi = min(vals), max(vals)
    if math.isclose(lo, hi):
        lo, hi = lo - 1.0, hi + 1.0
    span = hi - lo

    def to_pix(v):
        return lo_pix + (v - lo) / span * (hi_pix - lo_pix)

    return to_pix, lo, hi


def render_line_chart(series: dict[str, list[tuple[float, float]]], path, title: str = "", x_label: str = "", y_label: str = "") -> None:
    """Write an SVG chart with one polyline per entry of ``series``
    (name -> list of (x, y) points).  Non-finite points are dropped."""
    clean = {
        name: [(x, y) for x, y in pts if math.isfinite(x) and math.isfinite(y)]
        for name, pts in series.items()
    }
    clean = {name: pts for name, pts in clean.items() if pts}
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" viewBox="0 0 {_W} {_H}">',
        f'<rect width="{_W}" height="{_H}" fill="white"/>',
    ]
    if title:
        parts.append(f'<text x="{_W / 2}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>')
    if not clean:
        parts.append('<text x="50%" y="50%" text-anchor="middle">no data</text>')
    else:
        xs = [x for pts in clean.values() for x, _ in pts]
        ys = [y for pts in clean.values() for _, y in pts]
        to_x, x_lo, x_hi = _scale(xs, _MARGIN, _W - _MARGIN // 2)
        to_y, y_lo, y_hi = _scale(ys, _H - _MARGIN, _MARGIN // 2)
        ax = f'{_MARGIN},{_H - _MARGIN} {_W - _MARGIN // 2},{_H - _MARGIN}'
        ay = f'{_MARGIN},{_H - _MARGIN} {_MARGIN},{_MARGIN // 2}'
        parts.append(f'<polyline points="{ax}" fill="none" stroke="#333" stroke-width="1"/>')
        parts.append(f'<polyline points="{ay}" fill="none" stroke="#333" stroke-width="1"/>')
        parts.append(
            f'<text x="{_MARGIN}" y="{_H - _MARGIN + 16}" font-size="11">{x_lo:.4g}</text>'
            f'<text x="{_W - _MARGIN // 2}" y="{_H - _MARGIN + 16}" text-anchor="end" font-size="11">{x_hi:.4g}</text>'
            f'<text x="{_MARGIN - 4}" y="{_H - _MARGIN}" text-anchor="end" font-size="11">{y_lo:.4g}</text>'
            f'<text x="{_MARGIN - 4}" y="{_MARGIN // 2 + 10}" text-anchor="end" font-size="11">{y_hi:.4g}</text>'
        )
        if x_label:
            parts.append(f'<text x="{_W / 2}" y="{_H - 8}" text-anchor="middle" font-size="12">{escape(x_label)}</text>')
        if y_label:
            parts.append(
                f'<text x="14" y="{_H / 2}" text-anchor="middle" font-size="12" transform="rotate(-90 14 {_H / 2})">{escape(y_label)}</text>'
            )
        for idx, (name, pts) in enumerate(clean.items()):
            color = _COLORS[idx % len(_COLORS)]
            coords = " ".join(f"{to_x(x):.2f},{to_y(y):.2f}" for x, y in pts)
            parts.append(f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="1.5"/>')
            ly = _MARGIN // 2 + 14 * (idx + 1)
            parts.append(
                f'<line x1="{_W - 170}" y1="{ly - 4}" x2="{_W - 150}" y2="{ly - 4}" stroke="{color}" stroke-width="2"/>'
                f'<text x="{_W - 144}" y="{ly}" font-size="11">{escape(name)}</text>'
            )
    parts.append("</svg>")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("\n".join(parts) + "\n")
