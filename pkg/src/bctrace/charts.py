"""Minimal deterministic SVG line charts for report artifacts.

Hand-rolled rather than delegated to a plotting stack so that identical
inputs produce byte-identical files (no embedded dates, ids, or library
version strings), which the pipeline's reproducibility contract requires.
"""

from __future__ import annotations

import math

WIDTH, HEIGHT = 900, 360
MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 64, 16, 28, 44
COLORS = ("#1a1a1a", "#888888", "#c23b22", "#2e6f9e")
DASHES = ("", "6,4", "2,3", "8,3,2,3")


def _fmt(x):
    return f"{x:.2f}".rstrip("0").rstrip(".")


def _ticks(lo, hi, n=5):
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / n
    mag = 10 ** math.floor(math.log10(raw))
    step = min(s * mag for s in (1, 2, 5, 10) if s * mag >= raw)
    first = math.ceil(lo / step) * step
    out = []
    v = first
    while v <= hi + 1e-9:
        out.append(round(v, 10))
        v += step
    return out


def line_chart(series, title="", x_label="", y_label=""):
    """SVG text for one or more named line series.

    ``series`` is a list of (name, xs, ys) with missing ys as None; gaps
    break the polyline.
    """
    xs_all = [x for _, xs, _ in series for x in xs]
    ys_all = [y for _, _, ys in series for y in ys if y is not None]
    if not xs_all or not ys_all:
        xs_all, ys_all = [0.0, 1.0], [0.0, 1.0]
    x_lo, x_hi = min(xs_all), max(xs_all)
    y_lo, y_hi = min(ys_all), max(ys_all)
    if x_hi == x_lo:
        x_hi = x_lo + 1.0
    if y_hi == y_lo:
        y_hi = y_lo + 1.0
    pad = 0.04 * (y_hi - y_lo)
    y_lo, y_hi = y_lo - pad, y_hi + pad

    inner_w = WIDTH - MARGIN_L - MARGIN_R
    inner_h = HEIGHT - MARGIN_T - MARGIN_B

    def px(x):
        return MARGIN_L + (x - x_lo) / (x_hi - x_lo) * inner_w

    def py(y):
        return MARGIN_T + (1.0 - (y - y_lo) / (y_hi - y_lo)) * inner_h

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
    ]
    if title:
        parts.append(f'<text x="{WIDTH / 2:.0f}" y="18" text-anchor="middle" '
                     f'font-size="14">{title}</text>')

    for tv in _ticks(y_lo, y_hi):
        y = py(tv)
        parts.append(f'<line x1="{MARGIN_L}" y1="{_fmt(y)}" x2="{WIDTH - MARGIN_R}" '
                     f'y2="{_fmt(y)}" stroke="#dddddd" stroke-width="1"/>')
        parts.append(f'<text x="{MARGIN_L - 6}" y="{_fmt(y + 4)}" '
                     f'text-anchor="end">{_fmt(tv)}</text>')
    for tv in _ticks(x_lo, x_hi, 8):
        x = px(tv)
        parts.append(f'<line x1="{_fmt(x)}" y1="{HEIGHT - MARGIN_B}" x2="{_fmt(x)}" '
                     f'y2="{HEIGHT - MARGIN_B + 4}" stroke="#333333"/>')
        parts.append(f'<text x="{_fmt(x)}" y="{HEIGHT - MARGIN_B + 18}" '
                     f'text-anchor="middle">{_fmt(tv)}</text>')

    parts.append(f'<rect x="{MARGIN_L}" y="{MARGIN_T}" width="{inner_w}" '
                 f'height="{inner_h}" fill="none" stroke="#333333"/>')

    for si, (name, xs, ys) in enumerate(series):
        color = COLORS[si % len(COLORS)]
        dash = DASHES[si % len(DASHES)]
        dash_attr = f' stroke-dasharray="{dash}"' if dash else ""
        run = []
        chunks = []
        for x, y in zip(xs, ys):
            if y is None:
                if len(run) > 1:
                    chunks.append(run)
                run = []
            else:
                run.append((px(x), py(y)))
        if len(run) > 1:
            chunks.append(run)
        for chunk in chunks:
            pts = " ".join(f"{_fmt(x)},{_fmt(y)}" for x, y in chunk)
            parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" '
                         f'stroke-width="1.5"{dash_attr}/>')
        ly = MARGIN_T + 16 + 16 * si
        parts.append(f'<line x1="{WIDTH - MARGIN_R - 130}" y1="{ly - 4}" '
                     f'x2="{WIDTH - MARGIN_R - 104}" y2="{ly - 4}" stroke="{color}" '
                     f'stroke-width="1.5"{dash_attr}/>')
        parts.append(f'<text x="{WIDTH - MARGIN_R - 98}" y="{ly}">{name}</text>')

    if x_label:
        parts.append(f'<text x="{WIDTH / 2:.0f}" y="{HEIGHT - 8}" '
                     f'text-anchor="middle">{x_label}</text>')
    if y_label:
        parts.append(f'<text x="16" y="{HEIGHT / 2:.0f}" text-anchor="middle" '
                     f'transform="rotate(-90 16 {HEIGHT / 2:.0f})">{y_label}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
