"""Minimal SVG line plots for inspecting traces."""

from __future__ import annotations

from dataclasses import dataclass, field
from xml.sax.saxutils import escape

import numpy as np

_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


@dataclass
class Series:
    label: str
    x: np.ndarray
    y: np.ndarray
    dashed: bool = False


@dataclass
class Panel:
    title: str
    ylabel: str = ""
    series: list[Series] = field(default_factory=list)


def _fmt(v: float) -> str:
    return f"{v:.4g}"


def _panel_svg(p: Panel, x0: float, y0: float, w: float, h: float) -> list[str]:
    out = [f'<text x="{x0 + w / 2:.1f}" y="{y0 - 6:.1f}" text-anchor="middle" font-size="12">{escape(p.title)}</text>',
           f'<rect x="{x0:.1f}" y="{y0:.1f}" width="{w:.1f}" height="{h:.1f}" fill="none" stroke="#444"/>']
    xs = [s.x for s in p.series if len(s.x)]
    ys = [s.y for s in p.series if len(s.y)]
    if not xs:
        return out
    xmin, xmax = min(float(np.min(x)) for x in xs), max(float(np.max(x)) for x in xs)
    ymin, ymax = min(float(np.min(y)) for y in ys), max(float(np.max(y)) for y in ys)
    if xmax == xmin:
        xmax = xmin + 1.0
    if ymax == ymin:
        half = 0.01 * abs(ymin) or 0.5
        ymin, ymax = ymin - half, ymax + half
    pad = 0.05 * (ymax - ymin)
    ymin, ymax = ymin - pad, ymax + pad

    def sx(v):
        return x0 + (v - xmin) / (xmax - xmin) * w

    def sy(v):
        return y0 + h - (v - ymin) / (ymax - ymin) * h

    for frac in (0.0, 0.5, 1.0):
        yv = ymin + frac * (ymax - ymin)
        out.append(f'<text x="{x0 - 4:.1f}" y="{sy(yv) + 4:.1f}" text-anchor="end" font-size="10">{_fmt(yv)}</text>')
        xv = xmin + frac * (xmax - xmin)
        out.append(f'<text x="{sx(xv):.1f}" y="{y0 + h + 14:.1f}" text-anchor="middle" font-size="10">{_fmt(xv)}</text>')
    if p.ylabel:
        out.append(f'<text x="{x0 - 48:.1f}" y="{y0 + h / 2:.1f}" font-size="10" '
                   f'transform="rotate(-90 {x0 - 48:.1f} {y0 + h / 2:.1f})" text-anchor="middle">{escape(p.ylabel)}</text>')
    for i, s in enumerate(p.series):
        color = _COLORS[i % len(_COLORS)]
        pts = " ".join(f"{sx(a):.2f},{sy(b):.2f}" for a, b in zip(s.x, s.y))
        dash = ' stroke-dasharray="4 3"' if s.dashed else ""
        out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.2"{dash}/>')
        out.append(f'<text x="{x0 + w + 6:.1f}" y="{y0 + 12 + 12 * i:.1f}" font-size="10" fill="{color}">'
                   f'{escape(s.label)}</text>')
    return out


def figure(panels: list[Panel], width: int = 760, panel_height: int = 160, xlabel: str = "t (s)") -> str:
    """Stack panels vertically into one SVG document."""
    left, right, top, gap = 70, 110, 24, 46
    h = top + len(panels) * (panel_height + gap)
    body = []
    for k, p in enumerate(panels):
        body += _panel_svg(p, left, top + k * (panel_height + gap), width - left - right, panel_height)
    body.append(f'<text x="{(width - right + left) / 2:.1f}" y="{h - 6}" text-anchor="middle" font-size="11">'
                f'{escape(xlabel)}</text>')
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{h}" '
            f'viewBox="0 0 {width} {h}">\n<rect width="100%" height="100%" fill="white"/>\n'
            + "\n".join(body) + "\n</svg>\n")


def trace_panels(traces: dict, signals=("f", "f_n", "p_pv", "p_bat", "soc_dif")) -> list[Panel]:
    """One panel per signal; solid lines for the first trace, dashed for the rest."""
    units = {"f": "p.u.", "f_n": "p.u.", "p_pv": "kW", "p_inv": "kW", "p_bat": "kW", "soc": "%", "soc_dif": "%"}
    panels = []
    for sig in signals:
        p = Panel(sig, units.get(sig, ""))
        for j, (name, tr) in enumerate(traces.items()):
            data = np.asarray(getattr(tr, sig))
            if data.ndim == 1:
                p.series.append(Series(name, tr.t, data, dashed=j > 0))
            else:
                for i in range(data.shape[1]):
                    p.series.append(Series(f"{name} {i + 1}", tr.t, data[:, i], dashed=j > 0))
        panels.append(p)
    return panels
