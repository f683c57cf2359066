"""Standalone SVG charts written by hand; CSV files stay the authoritative output."""

from __future__ import annotations

import math
from xml.sax.saxutils import escape

WIDTH, HEIGHT = 640, 400
MARGIN = dict(left=70, right=70, top=40, bottom=60)
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf", "#7f7f7f")


def _fmt(v: float) -> str:
    if v == 0:
        return "0"
    if abs(v) >= 1e4 or abs(v) < 1e-2:
        return f"{v:.1e}"
    return f"{v:.3g}"


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        return [lo]
    raw = (hi - lo) / n
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 5, 10) if m * mag >= raw), default=10 * mag)
    start = math.ceil(lo / step) * step
    out = []
    v = start
    while v <= hi + 1e-9 * step:
        out.append(round(v, 12))
        v += step
    return out


class _Canvas:
    def __init__(self, title: str, xlabel: str, ylabel: str, y2label: str | None = None):
        self.parts = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
            f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">',
            f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
            f'<text x="{WIDTH / 2}" y="22" text-anchor="middle" font-size="14">{escape(title)}</text>',
            f'<text x="{WIDTH / 2}" y="{HEIGHT - 12}" text-anchor="middle">{escape(xlabel)}</text>',
            f'<text transform="translate(16,{HEIGHT / 2}) rotate(-90)" text-anchor="middle">{escape(ylabel)}</text>',
        ]
        if y2label:
            self.parts.append(
                f'<text transform="translate({WIDTH - 14},{HEIGHT / 2}) rotate(90)" text-anchor="middle">'
                f"{escape(y2label)}</text>"
            )
        self.x0, self.x1 = MARGIN["left"], WIDTH - MARGIN["right"]
        self.y0, self.y1 = HEIGHT - MARGIN["bottom"], MARGIN["top"]
        self.parts.append(
            f'<rect x="{self.x0}" y="{self.y1}" width="{self.x1 - self.x0}" height="{self.y0 - self.y1}" '
            'fill="none" stroke="black"/>'
        )

    def add(self, s: str):
        self.parts.append(s)

    def y_axis(self, ticks, to_px, labels=None, right=False):
        x = self.x1 if right else self.x0
        for i, t in enumerate(ticks):
            y = to_px(t)
            lab = labels[i] if labels else _fmt(t)
            dx, anchor = (6, "start") if right else (-6, "end")
            self.add(f'<line x1="{x}" x2="{x - dx / 2}" y1="{y:.2f}" y2="{y:.2f}" stroke="black"/>')
            self.add(f'<text x="{x + dx}" y="{y + 4:.2f}" text-anchor="{anchor}">{escape(lab)}</text>')

    def legend(self, names, colors, dashed=()):
        for i, (name, col) in enumerate(zip(names, colors)):
            y = self.y1 + 14 + 16 * i
            dash = ' stroke-dasharray="5,3"' if name in dashed else ""
            self.add(f'<line x1="{self.x0 + 10}" x2="{self.x0 + 30}" y1="{y}" y2="{y}" stroke="{col}" stroke-width="3"{dash}/>')
            self.add(f'<text x="{self.x0 + 36}" y="{y + 4}">{escape(name)}</text>')

    def svg(self) -> str:
        return "\n".join(self.parts + ["</svg>"]) + "\n"


def line_chart(series: dict, title: str = "", xlabel: str = "", ylabel: str = "") -> str:
    """``series`` maps a name to (xs, ys); non-finite points are skipped."""
    c = _Canvas(title, xlabel, ylabel)
    pts = [(x, y) for xs, ys in series.values() for x, y in zip(xs, ys) if math.isfinite(y)]
    if not pts:
        c.add(f'<text x="{WIDTH / 2}" y="{HEIGHT / 2}" text-anchor="middle">no finite data</text>')
        return c.svg()
    xlo, xhi = min(p[0] for p in pts), max(p[0] for p in pts)
    ylo, yhi = min(p[1] for p in pts), max(p[1] for p in pts)
    if xhi == xlo:
        xlo, xhi = xlo - 1, xhi + 1
    if yhi == ylo:
        ylo, yhi = ylo - 0.5, yhi + 0.5
    pad = 0.05 * (yhi - ylo)
    ylo, yhi = ylo - pad, yhi + pad

    def px(x):
        return c.x0 + (x - xlo) / (xhi - xlo) * (c.x1 - c.x0)

    def py(y):
        return c.y0 - (y - ylo) / (yhi - ylo) * (c.y0 - c.y1)

    c.y_axis(_ticks(ylo, yhi), py)
    for t in _ticks(xlo, xhi):
        c.add(f'<text x="{px(t):.2f}" y="{c.y0 + 18}" text-anchor="middle">{_fmt(t)}</text>')
    for i, (name, (xs, ys)) in enumerate(series.items()):
        col = PALETTE[i % len(PALETTE)]
        seg = [f"{px(x):.2f},{py(y):.2f}" for x, y in zip(xs, ys) if math.isfinite(y)]
        if seg:
            c.add(f'<polyline points="{" ".join(seg)}" fill="none" stroke="{col}" stroke-width="2"/>')
            for p in seg:
                x, y = p.split(",")
                c.add(f'<circle cx="{x}" cy="{y}" r="3" fill="{col}"/>')
    c.legend(list(series), [PALETTE[i % len(PALETTE)] for i in range(len(series))])
    return c.svg()


def histogram_chart(edges, counts, title: str = "", xlabel: str = "") -> str:
    c = _Canvas(title, xlabel, "count")
    top = max(max(counts), 1)
    lo, hi = edges[0], edges[-1]
    span = (hi - lo) or 1.0

    def px(x):
        return c.x0 + (x - lo) / span * (c.x1 - c.x0)

    def py(y):
        return c.y0 - y / top * (c.y0 - c.y1)

    c.y_axis(_ticks(0, top), py)
    for a, b, n in zip(edges[:-1], edges[1:], counts):
        if n:
            c.add(
                f'<rect x="{px(a):.2f}" y="{py(n):.2f}" width="{max(px(b) - px(a), 0.5):.2f}" '
                f'height="{c.y0 - py(n):.2f}" fill="{PALETTE[0]}" stroke="white" stroke-width="0.5"/>'
            )
    for t in (lo, (lo + hi) / 2, hi):
        c.add(f'<text x="{px(t):.2f}" y="{c.y0 + 18}" text-anchor="middle">{_fmt(t)}</text>')
    return c.svg()


def upper_bound_chart(k_plus_1, curl_ub, proposed_ub, accuracy=None, title: str = "Supervised loss upper bounds") -> str:
    """Grouped bars of the two upper bounds per K+1 with validation accuracy on a right axis.

    Infinite bounds are drawn as hatched bars reaching the top and labelled
    ``inf``. The left axis turns logarithmic when finite values span more than
    two decades.
    """
    c = _Canvas(title, "K+1", "upper bound", "accuracy" if accuracy is not None else None)
    vals = [v for v in list(curl_ub) + list(proposed_ub) if math.isfinite(v) and v > 0]
    use_log = bool(vals) and max(vals) / min(vals) > 100
    if not vals:
        lo, hi = 0.0, 1.0
    elif use_log:
        lo, hi = math.floor(math.log10(min(vals))), math.ceil(math.log10(max(vals)) + 1e-12)
        hi = max(hi, lo + 1)
    else:
        finite = [v for v in list(curl_ub) + list(proposed_ub) if math.isfinite(v)]
        lo, hi = min(0.0, min(finite)), max(finite) * 1.1 or 1.0

    def py(v):
        if not math.isfinite(v):
            return c.y1
        if use_log:
            v = math.log10(max(v, 10.0**lo))
        return c.y0 - (v - lo) / (hi - lo) * (c.y0 - c.y1)

    if use_log:
        ticks = list(range(int(lo), int(hi) + 1))
        c.y_axis(ticks, lambda t: c.y0 - (t - lo) / (hi - lo) * (c.y0 - c.y1), [f"1e{t}" for t in ticks])
    else:
        c.y_axis(_ticks(lo, hi), py)
    c.add(
        '<defs><pattern id="hatch" width="6" height="6" patternUnits="userSpaceOnUse" patternTransform="rotate(45)">'
        '<line x1="0" y1="0" x2="0" y2="6" stroke="black" stroke-width="2"/></pattern></defs>'
    )
    n = len(k_plus_1)
    group = (c.x1 - c.x0) / max(n, 1)
    bar = group * 0.3
    colors = (PALETTE[1], PALETTE[0])
    centers = []
    for i, kp in enumerate(k_plus_1):
        gx = c.x0 + group * (i + 0.5)
        centers.append(gx)
        for j, v in enumerate((curl_ub[i], proposed_ub[i])):
            x = gx - bar + j * bar
            if math.isnan(v):
                c.add(f'<text x="{x + bar / 2:.2f}" y="{c.y0 - 4}" text-anchor="middle" font-size="10">n/a</text>')
                continue
            top = py(v)
            fill = "url(#hatch)" if math.isinf(v) else colors[j]
            c.add(
                f'<rect x="{x:.2f}" y="{top:.2f}" width="{bar:.2f}" height="{max(c.y0 - top, 0):.2f}" '
                f'fill="{fill}" stroke="{colors[j]}"/>'
            )
            label = "inf" if math.isinf(v) else _fmt(v)
            c.add(f'<text x="{x + bar / 2:.2f}" y="{top - 3:.2f}" text-anchor="middle" font-size="10">{label}</text>')
        c.add(f'<text x="{gx:.2f}" y="{c.y0 + 18}" text-anchor="middle">{kp}</text>')
    names, cols, dashed = ["CURL-based", "proposed"], list(colors), ()
    if accuracy is not None:
        def pa(a):
            return c.y0 - a * (c.y0 - c.y1)

        c.y_axis([0, 0.25, 0.5, 0.75, 1.0], pa, right=True)
        seg = [f"{x:.2f},{pa(a):.2f}" for x, a in zip(centers, accuracy) if math.isfinite(a)]
        if seg:
            c.add(f'<polyline points="{" ".join(seg)}" fill="none" stroke="black" stroke-width="2" stroke-dasharray="5,3"/>')
        names.append("accuracy")
        cols.append("black")
        dashed = ("accuracy",)
    c.legend(names, cols, dashed)
    return c.svg()
