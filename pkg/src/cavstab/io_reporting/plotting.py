"""Deterministic SVG rendering of variance curves.

The output is built from fixed-precision strings only, so identical inputs
give byte-identical documents.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from xml.sax.saxutils import escape

import numpy as np

from ..errors import DomainError
from ..stability_lab import CurveFit, VariancePoint

WIDTH, HEIGHT = 640, 420
LEFT, RIGHT, TOP, BOTTOM = 78, 24, 36, 56


@dataclass(frozen=True)
class PlotAxes:
    log_x: bool = True
    log_y: bool = True
    clip_floor: float = 1e-12


class _Scale:
    def __init__(self, lo: float, hi: float, log: bool, p0: float, p1: float):
        self.log = log
        if log:
            lo, hi = math.log10(lo), math.log10(hi)
        if hi - lo < 1e-12:
            pad = 0.5 if log else max(abs(lo) * 0.1, 0.5)
            lo, hi = lo - pad, hi + pad
        self.lo, self.hi, self.p0, self.p1 = lo, hi, p0, p1

    def __call__(self, v: float) -> float:
        t = math.log10(v) if self.log else v
        return self.p0 + (t - self.lo) / (self.hi - self.lo) * (self.p1 - self.p0)

    def ticks(self) -> list[tuple[float, str]]:
        if self.log:
            ks = range(math.floor(self.lo), math.ceil(self.hi) + 1)
            return [(10.0**k, f"1e{k}") for k in ks if self.lo - 1e-9 <= k <= self.hi + 1e-9]
        return [(v, f"{v:.3g}") for v in np.linspace(self.lo, self.hi, 5)]


def _f(v: float) -> str:
    return f"{v:.2f}"


def render_variance_plot(
    points: list[VariancePoint],
    fit: CurveFit | None = None,
    axes: PlotAxes = PlotAxes(),
    title: str = "",
    x_label: str = "N",
    y_label: str = "variance",
) -> str:
    """Line plot with +-1 spread error bars and an optional dashed a/N + b overlay.

    Values below ``axes.clip_floor`` are drawn at the floor. If every point
    is clipped a warning line is written into the figure.
    """
    pts = [p for p in points if math.isfinite(p.mean_variance) and p.x > 0]
    if not pts:
        raise DomainError("nothing to plot: need at least one finite point")
    floor = axes.clip_floor
    clip = (lambda v: max(v, floor)) if axes.log_y else (lambda v: v)
    xs = [float(p.x) for p in pts]
    ys = [clip(p.mean_variance) for p in pts]
    spreads = [p.spread if math.isfinite(p.spread) else 0.0 for p in pts]
    lows = [clip(y - s) for y, s in zip(ys, spreads)]
    highs = [clip(y + s) for y, s in zip(ys, spreads)]

    curve = []
    if fit is not None:
        grid = np.geomspace(min(xs), max(xs), 64) if axes.log_x else np.linspace(min(xs), max(xs), 64)
        curve = [(float(x), clip(fit.a / x + fit.b)) for x in grid]
    all_y = ys + lows + highs + [y for _, y in curve]
    if not axes.log_y:
        all_y.append(0.0)
    sx = _Scale(min(xs), max(xs), axes.log_x, LEFT, WIDTH - RIGHT)
    sy = _Scale(min(all_y), max(all_y), axes.log_y, HEIGHT - BOTTOM, TOP)

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<g font-family="sans-serif" font-size="11" fill="black">',
    ]
    x0, x1, y0, y1 = LEFT, WIDTH - RIGHT, HEIGHT - BOTTOM, TOP
    out.append(f'<path d="M{x0} {y1} L{x0} {y0} L{x1} {y0}" stroke="black" fill="none"/>')
    for v, label in sx.ticks():
        px = _f(sx(v))
        out.append(f'<line x1="{px}" y1="{y0}" x2="{px}" y2="{y0 + 5}" stroke="black"/>')
        out.append(f'<text x="{px}" y="{y0 + 18}" text-anchor="middle">{label}</text>')
    for v, label in sy.ticks():
        py = _f(sy(v))
        out.append(f'<line x1="{x0 - 5}" y1="{py}" x2="{x0}" y2="{py}" stroke="black"/>')
        out.append(f'<text x="{x0 - 8}" y="{py}" text-anchor="end" dominant-baseline="middle">{label}</text>')
    out.append(f'<text x="{_f((x0 + x1) / 2)}" y="{HEIGHT - 14}" text-anchor="middle">{escape(x_label)}</text>')
    out.append(
        f'<text x="16" y="{_f((y0 + y1) / 2)}" text-anchor="middle" '
        f'transform="rotate(-90 16 {_f((y0 + y1) / 2)})">{escape(y_label)}</text>'
    )
    if title:
        out.append(f'<text x="{_f((x0 + x1) / 2)}" y="20" text-anchor="middle" font-size="13">{escape(title)}</text>')

    if curve:
        d = " ".join(f"{'M' if i == 0 else 'L'}{_f(sx(x))} {_f(sy(y))}" for i, (x, y) in enumerate(curve))
        out.append(f'<path d="{d}" stroke="#d62728" stroke-dasharray="6 4" fill="none"/>')
    for x, lo, hi in zip(xs, lows, highs):
        px = _f(sx(x))
        out.append(f'<line x1="{px}" y1="{_f(sy(lo))}" x2="{px}" y2="{_f(sy(hi))}" stroke="#1f77b4"/>')
    if len(xs) > 1:
        poly = " ".join(f"{_f(sx(x))},{_f(sy(y))}" for x, y in zip(xs, ys))
        out.append(f'<polyline points="{poly}" stroke="#1f77b4" fill="none"/>')
    for x, y in zip(xs, ys):
        out.append(f'<circle cx="{_f(sx(x))}" cy="{_f(sy(y))}" r="3" fill="#1f77b4"/>')

    if fit is not None:
        out.append(f'<text x="{x1 - 4}" y="{y1 + 14}" text-anchor="end" fill="#d62728">a={fit.a:.3g}, b={fit.b:.3g}</text>')
    if axes.log_y and all(p.mean_variance <= floor for p in pts):
        out.append(
            f'<text x="{x0 + 6}" y="{y1 + 14}" fill="#b00000">warning: all points at or below clip floor {floor:.3g}</text>'
        )
    out.append("</g>")
    out.append("</svg>")
    return "\n".join(out) + "\n"
