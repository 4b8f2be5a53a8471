"""Static SVG line plots with no plotting dependency.

Fixed-layout figures: linear or log10 y axis, 1-2-5 tick selection, light
grid, inline legend. Coordinates are written with explicit %.2f precision
and data values with %g, so a given series always produces the identical
file.
"""
from __future__ import annotations

import math

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd",
           "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f")

LOG_FLOOR = 1e-30      # log-axis clamp; keeps zero series plottable

_W, _H = 720.0, 440.0
_ML, _MR, _MT, _MB = 76.0, 18.0, 34.0, 52.0


def _nice_step(span: float, target: int) -> float:
    raw = span / max(target, 1)
    mag = 10.0 ** math.floor(math.log10(raw))
    for m in (1.0, 2.0, 5.0, 10.0):
        if m * mag >= raw:
            return m * mag
    return 10.0 * mag


def _lin_ticks(lo: float, hi: float, target: int = 5) -> list[float]:
    if hi <= lo:
        hi = lo + (abs(lo) if lo != 0.0 else 1.0)
    step = _nice_step(hi - lo, target)
    first = math.ceil(lo / step - 1e-9) * step
    ticks = []
    v = first
    while v <= hi + 1e-9 * step:
        ticks.append(0.0 if abs(v) < 1e-12 * step else v)
        v += step
    return ticks


def _log_ticks(lo: float, hi: float) -> list[float]:
    d0 = math.floor(math.log10(lo) + 1e-12)
    d1 = math.ceil(math.log10(hi) - 1e-12)
    stride = max(1, (d1 - d0) // 8)
    return [10.0 ** d for d in range(d0, d1 + 1, stride)]


def _fmt(v: float) -> str:
    return f"{v:.4g}"


def _esc(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def line_plot(path: str, series, title: str = "", xlabel: str = "",
              ylabel: str = "", logy: bool = False) -> None:
    """Write one SVG line chart.

    series: iterable of (label, xs, ys) with matching lengths. Empty input
    (no series, or every series empty) raises ValueError so the caller can
    decide to warn and skip. On a log axis, values below LOG_FLOOR are
    clamped rather than dropped. Non-finite points are dropped so a stray
    inf in a diagnostic series degrades the curve, not the whole chart.
    """
    data = []
    for label, xs, ys in series:
        xs = [float(v) for v in xs]
        ys = [float(v) for v in ys]
        if len(xs) != len(ys):
            raise ValueError(f"series {label!r} has mismatched lengths")
        pts = [(x, y) for x, y in zip(xs, ys)
               if math.isfinite(x) and math.isfinite(y)]
        if pts:
            data.append((str(label), [p[0] for p in pts], [p[1] for p in pts]))
    if not data:
        raise ValueError("no data to plot")

    if logy:
        data = [(lab, xs, [max(y, LOG_FLOOR) for y in ys]) for lab, xs, ys in data]

    xlo = min(min(xs) for _, xs, _ in data)
    xhi = max(max(xs) for _, xs, _ in data)
    ylo = min(min(ys) for _, _, ys in data)
    yhi = max(max(ys) for _, _, ys in data)
    if xhi <= xlo:
        xlo, xhi = xlo - 0.5, xlo + 0.5
    if logy:
        if yhi <= ylo:
            ylo, yhi = ylo / 10.0, ylo * 10.0
        ylo_l, yhi_l = math.log10(ylo), math.log10(yhi)
        if yhi_l - ylo_l < 1.0:
            pad = 0.5 * (1.0 - (yhi_l - ylo_l))
            ylo_l -= pad
            yhi_l += pad
        yticks = _log_ticks(10.0 ** ylo_l, 10.0 ** yhi_l)
        ylo_l = min(ylo_l, math.log10(yticks[0]))
        yhi_l = max(yhi_l, math.log10(yticks[-1]))
    else:
        if yhi <= ylo:
            spread = abs(ylo) if ylo != 0.0 else 1.0
            ylo, yhi = ylo - 0.5 * spread, ylo + 0.5 * spread
        pad = 0.06 * (yhi - ylo)
        ylo, yhi = ylo - pad, yhi + pad
        yticks = _lin_ticks(ylo, yhi)
    xticks = _lin_ticks(xlo, xhi, target=6)

    pw = _W - _ML - _MR
    ph = _H - _MT - _MB

    def px(x: float) -> float:
        return _ML + pw * (x - xlo) / (xhi - xlo)

    def py(y: float) -> float:
        if logy:
            fr = (math.log10(max(y, LOG_FLOOR)) - ylo_l) / (yhi_l - ylo_l)
        else:
            fr = (y - ylo) / (yhi - ylo)
        return _MT + ph * (1.0 - fr)

    out = []
    out.append(f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W:.0f}" '
               f'height="{_H:.0f}" viewBox="0 0 {_W:.0f} {_H:.0f}">')
    out.append(f'<rect width="{_W:.0f}" height="{_H:.0f}" fill="white"/>')
    font = 'font-family="Helvetica,Arial,sans-serif"'

    for t in yticks:
        y = py(t)
        if y < _MT - 1e-6 or y > _MT + ph + 1e-6:
            continue
        out.append(f'<line x1="{_ML:.2f}" y1="{y:.2f}" x2="{_ML + pw:.2f}" '
                   f'y2="{y:.2f}" stroke="#dddddd" stroke-width="1"/>')
        out.append(f'<text x="{_ML - 6:.2f}" y="{y + 3.5:.2f}" {font} '
                   f'font-size="11" text-anchor="end">{_fmt(t)}</text>')
    for t in xticks:
        x = px(t)
        out.append(f'<line x1="{x:.2f}" y1="{_MT:.2f}" x2="{x:.2f}" '
                   f'y2="{_MT + ph:.2f}" stroke="#eeeeee" stroke-width="1"/>')
        out.append(f'<text x="{x:.2f}" y="{_MT + ph + 16:.2f}" {font} '
                   f'font-size="11" text-anchor="middle">{_fmt(t)}</text>')

    out.append(f'<rect x="{_ML:.2f}" y="{_MT:.2f}" width="{pw:.2f}" '
               f'height="{ph:.2f}" fill="none" stroke="#444444" stroke-width="1"/>')

    for k, (label, xs, ys) in enumerate(data):
        color = PALETTE[k % len(PALETTE)]
        pts = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in zip(xs, ys))
        if len(xs) == 1:
            out.append(f'<circle cx="{px(xs[0]):.2f}" cy="{py(ys[0]):.2f}" '
                       f'r="3" fill="{color}"/>')
        else:
            out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" '
                       f'stroke-width="1.6"/>')

    # legend, top-right inside the frame
    if len(data) > 1 or data[0][0]:
        lx = _ML + pw - 150.0
        ly = _MT + 10.0
        lh = 16.0 * len(data) + 8.0
        out.append(f'<rect x="{lx:.2f}" y="{ly:.2f}" width="144" height="{lh:.2f}" '
                   f'fill="white" fill-opacity="0.85" stroke="#999999" stroke-width="0.8"/>')
        for k, (label, _, _) in enumerate(data):
            color = PALETTE[k % len(PALETTE)]
            yy = ly + 14.0 + 16.0 * k
            out.append(f'<line x1="{lx + 8:.2f}" y1="{yy - 3.5:.2f}" x2="{lx + 28:.2f}" '
                       f'y2="{yy - 3.5:.2f}" stroke="{color}" stroke-width="2"/>')
            out.append(f'<text x="{lx + 34:.2f}" y="{yy:.2f}" {font} '
                       f'font-size="11">{_esc(label)}</text>')

    if title:
        out.append(f'<text x="{_W / 2:.2f}" y="20" {font} font-size="14" '
                   f'text-anchor="middle">{_esc(title)}</text>')
    if xlabel:
        out.append(f'<text x="{_ML + pw / 2:.2f}" y="{_H - 14:.2f}" {font} '
                   f'font-size="12" text-anchor="middle">{_esc(xlabel)}</text>')
    if ylabel:
        out.append(f'<text x="16" y="{_MT + ph / 2:.2f}" {font} font-size="12" '
                   f'text-anchor="middle" transform="rotate(-90 16 {_MT + ph / 2:.2f})">'
                   f'{_esc(ylabel)}</text>')
    out.append("</svg>")

    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(out) + "\n")
