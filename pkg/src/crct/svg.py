"""Small static SVG renderers for reports, training curves and saliency overlays."""

from __future__ import annotations

from typing import Sequence
from xml.sax.saxutils import escape

W, H = 480, 320
MARGIN = (60, 40, 20, 50)  # left, top, right, bottom


def _doc(body: list[str], width: int = W, height: int = H) -> str:
    head = f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">'
    return "\n".join([head, f'<rect width="{width}" height="{height}" fill="white"/>', *body, "</svg>"]) + "\n"


def _text(x, y, s, size=12, anchor="middle", rotate=None) -> str:
    rot = f' transform="rotate({rotate} {x:.1f} {y:.1f})"' if rotate is not None else ""
    return f'<text x="{x:.1f}" y="{y:.1f}" font-size="{size}" font-family="sans-serif" text-anchor="{anchor}"{rot}>{escape(str(s))}</text>'


def _frame(title: str, x_label: str, y_label: str) -> tuple[list[str], tuple[float, float, float, float]]:
    l, t, r, b = MARGIN
    x0, y0, x1, y1 = l, t, W - r, H - b
    body = [
        f'<rect x="{x0}" y="{y0}" width="{x1 - x0}" height="{y1 - y0}" fill="none" stroke="black"/>',
        _text(W / 2, t / 2 + 6, title, 14),
        _text((x0 + x1) / 2, H - 10, x_label),
        _text(16, (y0 + y1) / 2, y_label, rotate=-90),
    ]
    return body, (x0, y0, x1, y1)


def _nice_max(v: float) -> float:
    return v if v > 0 else 1.0


def line_plot(xs: Sequence[float], ys: Sequence[float], title="", x_label="", y_label="", y_max: float | None = None) -> str:
    body, (x0, y0, x1, y1) = _frame(title, x_label, y_label)
    if xs:
        lo, hi = min(xs), max(xs)
        span = hi - lo or 1.0
        top = _nice_max(max(ys) if y_max is None else y_max)

        def px(x):
            return x0 + (x - lo) / span * (x1 - x0)

        def py(y):
            return y1 - y / top * (y1 - y0)

        pts = " ".join(f"{px(x):.1f},{py(y):.1f}" for x, y in zip(xs, ys))
        body.append(f'<polyline points="{pts}" fill="none" stroke="#1f77b4" stroke-width="2"/>')
        for x, y in zip(xs, ys):
            body.append(f'<circle cx="{px(x):.1f}" cy="{py(y):.1f}" r="3" fill="#1f77b4"/>')
            body.append(_text(px(x), y1 + 14, f"{x:g}", 10))
        for frac in (0.0, 0.5, 1.0):
            body.append(_text(x0 - 6, py(frac * top) + 4, f"{frac * top:.3g}", 10, anchor="end"))
    return _doc(body)


def bar_plot(labels: Sequence[str], counts: Sequence[float], title="", x_label="", y_label="") -> str:
    body, (x0, y0, x1, y1) = _frame(title, x_label, y_label)
    n = len(labels)
    if n:
        top = _nice_max(max(counts))
        slot = (x1 - x0) / n
        for i, (lab, c) in enumerate(zip(labels, counts)):
            h = c / top * (y1 - y0)
            bx = x0 + i * slot + slot * 0.15
            body.append(f'<rect x="{bx:.1f}" y="{y1 - h:.1f}" width="{slot * 0.7:.1f}" height="{h:.1f}" fill="#ff7f0e"/>')
            body.append(_text(x0 + (i + 0.5) * slot, y1 + 14, lab, 10))
            body.append(_text(x0 + (i + 0.5) * slot, y1 - h - 4, f"{c:g}", 10))
    return _doc(body)


def _heat(s: float) -> str:
    # blue (cold) through red (warm)
    s = min(max(s, 0.0), 1.0)
    return f"rgb({int(255 * s)},{int(80 * (1 - abs(2 * s - 1)))},{int(255 * (1 - s))})"


def saliency_overlay(attrs, gt, title: str = "", size: int = 480) -> str:
    """One colored box per attributed element, drawn on the unit-square chart layout.

    Layout coordinates are image-like (y grows downward), as in SVG.
    """
    body = []
    for el in gt.elements:
        x0, y0, x1, y1 = el.bbox
        body.append(
            f'<rect x="{x0 * size:.1f}" y="{y0 * size:.1f}" width="{(x1 - x0) * size:.1f}" '
            f'height="{(y1 - y0) * size:.1f}" fill="none" stroke="#cccccc" stroke-width="0.5"/>'
        )
    for a in attrs:
        x0, y0, x1, y1 = a.bbox
        body.append(
            f'<rect class="saliency" data-source="{a.source_index}" data-saliency="{a.saliency:.6f}" '
            f'x="{x0 * size:.1f}" y="{y0 * size:.1f}" width="{max((x1 - x0) * size, 0.5):.1f}" '
            f'height="{max((y1 - y0) * size, 0.5):.1f}" fill="{_heat(a.saliency)}" fill-opacity="0.6" stroke="{_heat(a.saliency)}"/>'
        )
    if title:
        body.append(_text(size / 2, 14, title, 11))
    return _doc(body, size, size)
