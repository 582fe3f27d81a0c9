"""Tiny dependency-free SVG line charts. Plots are a convenience rendering of
the CSV tables, which remain the contract."""

from __future__ import annotations

from pathlib import Path

_WIDTH, _HEIGHT = 640, 400
_MARGIN = 60
_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _scale(values, lo, hi, out_lo, out_hi):
    span = (hi - lo) or 1.0
    return [out_lo + (v - lo) / span * (out_hi - out_lo) for v in values]


def write_line_chart(path, series: dict[str, list[tuple[float, float]]],
                     title: str, x_label: str, y_label: str) -> None:
    """Write one SVG with a polyline per named series."""
    xs = [x for pts in series.values() for x, _ in pts]
    ys = [y for pts in series.values() for _, y in pts]
    if not xs:
        raise ValueError("nothing to plot")
    x_lo, x_hi = min(xs), max(xs)
    y_lo, y_hi = min(ys), max(ys)
    if y_lo == y_hi:
        y_lo, y_hi = y_lo - 0.5, y_hi + 0.5

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_WIDTH}" height="{_HEIGHT}" '
        f'viewBox="0 0 {_WIDTH} {_HEIGHT}">',
        f'<rect width="{_WIDTH}" height="{_HEIGHT}" fill="white"/>',
        f'<text x="{_WIDTH // 2}" y="24" text-anchor="middle" font-size="16" '
        f'font-family="sans-serif">{title}</text>',
        f'<line x1="{_MARGIN}" y1="{_HEIGHT - _MARGIN}" x2="{_WIDTH - 20}" '
        f'y2="{_HEIGHT - _MARGIN}" stroke="black"/>',
        f'<line x1="{_MARGIN}" y1="{_HEIGHT - _MARGIN}" x2="{_MARGIN}" y2="40" '
        f'stroke="black"/>',
        f'<text x="{_WIDTH // 2}" y="{_HEIGHT - 16}" text-anchor="middle" '
        f'font-size="12" font-family="sans-serif">{x_label}</text>',
        f'<text x="18" y="{_HEIGHT // 2}" text-anchor="middle" font-size="12" '
        f'font-family="sans-serif" transform="rotate(-90 18 {_HEIGHT // 2})">{y_label}</text>',
        f'<text x="{_MARGIN}" y="{_HEIGHT - _MARGIN + 16}" font-size="10" '
        f'font-family="sans-serif">{x_lo:g}</text>',
        f'<text x="{_WIDTH - 40}" y="{_HEIGHT - _MARGIN + 16}" font-size="10" '
        f'font-family="sans-serif">{x_hi:g}</text>',
        f'<text x="{_MARGIN - 6}" y="{_HEIGHT - _MARGIN}" text-anchor="end" '
        f'font-size="10" font-family="sans-serif">{y_lo:.3g}</text>',
        f'<text x="{_MARGIN - 6}" y="46" text-anchor="end" font-size="10" '
        f'font-family="sans-serif">{y_hi:.3g}</text>',
    ]
    for i, (name, pts) in enumerate(series.items()):
        color = _COLORS[i % len(_COLORS)]
        px = _scale([x for x, _ in pts], x_lo, x_hi, _MARGIN, _WIDTH - 20)
        py = _scale([y for _, y in pts], y_lo, y_hi, _HEIGHT - _MARGIN, 40)
        points = " ".join(f"{x:.2f},{y:.2f}" for x, y in zip(px, py))
        parts.append(
            f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{points}"/>'
        )
        parts.append(
            f'<text x="{_WIDTH - 150}" y="{56 + 16 * i}" font-size="12" fill="{color}" '
            f'font-family="sans-serif">{name}</text>'
        )
    parts.append("</svg>")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(parts) + "\n")
